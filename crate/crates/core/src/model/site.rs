use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Embedding,
    Block(usize),
}

/// Kinds are ordered as they occur inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    AttnOut,
    MlpOut,
    Residual,
}

/// Address of a hookable activation. The derived order is the order of
/// computation in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubmoduleId {
    pub layer: Layer,
    pub kind: SiteKind,
}

impl SubmoduleId {
    pub const EMBEDDING: SubmoduleId = SubmoduleId {
        layer: Layer::Embedding,
        kind: SiteKind::Residual,
    };

    pub fn residual(layer: usize) -> Self {
        SubmoduleId {
            layer: Layer::Block(layer),
            kind: SiteKind::Residual,
        }
    }

    pub fn attn(layer: usize) -> Self {
        SubmoduleId {
            layer: Layer::Block(layer),
            kind: SiteKind::AttnOut,
        }
    }

    pub fn mlp(layer: usize) -> Self {
        SubmoduleId {
            layer: Layer::Block(layer),
            kind: SiteKind::MlpOut,
        }
    }

    pub fn block(&self) -> Option<usize> {
        match self.layer {
            Layer::Embedding => None,
            Layer::Block(l) => Some(l),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match self.layer {
            Layer::Embedding if self.kind != SiteKind::Residual => {
                Err(Error::invalid("the embedding site only has a residual kind"))
            }
            Layer::Block(l) if l >= n_layers => Err(Error::invalid(format!(
                "site {self} is beyond the model's {n_layers} layers"
            ))),
            _ => Ok(()),
        }
    }

    /// Every site of a model, in computation order.
    pub fn all(n_layers: usize) -> Vec<SubmoduleId> {
        let mut out = vec![SubmoduleId::EMBEDDING];
        for l in 0..n_layers {
            out.extend([Self::attn(l), Self::mlp(l), Self::residual(l)]);
        }
        out
    }
}

impl fmt::Display for SubmoduleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.kind) {
            (Layer::Embedding, _) => write!(f, "embedding"),
            (Layer::Block(l), SiteKind::Residual) => write!(f, "resid.{l}"),
            (Layer::Block(l), SiteKind::AttnOut) => write!(f, "attn.{l}"),
            (Layer::Block(l), SiteKind::MlpOut) => write!(f, "mlp.{l}"),
        }
    }
}

impl FromStr for SubmoduleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "embedding" {
            return Ok(SubmoduleId::EMBEDDING);
        }
        let bad = || Error::invalid(format!("unrecognised site `{s}`"));
        let (kind, layer) = s.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        match kind {
            "resid" => Ok(Self::residual(layer)),
            "attn" => Ok(Self::attn(layer)),
            "mlp" => Ok(Self::mlp(layer)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for SubmoduleId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubmoduleId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Token positions of interest inside one input sequence (indices include BOS).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    pub verb: Option<usize>,
    pub final_noun: Option<usize>,
}

/// A token sequence with its annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub annotations: Annotations,
}

impl Example {
    pub fn new(tokens: Vec<usize>) -> Self {
        Example {
            tokens,
            annotations: Annotations::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PositionSelector {
    Absolute(usize),
    Verb,
    FinalNoun,
    All,
}

impl PositionSelector {
    pub fn resolve(&self, ann: &Annotations, len: usize) -> Result<Vec<usize>> {
        let one = |p: Option<usize>, what: &str| -> Result<Vec<usize>> {
            match p {
                Some(p) if p < len => Ok(vec![p]),
                Some(p) => Err(Error::invalid(format!("{what} position {p} outside length {len}"))),
                None => Err(Error::invalid(format!("no {what} annotation"))),
            }
        };
        match *self {
            PositionSelector::Absolute(p) => one(Some(p), "absolute"),
            PositionSelector::Verb => one(ann.verb, "verb"),
            PositionSelector::FinalNoun => one(ann.final_noun, "final-noun"),
            PositionSelector::All => Ok((0..len).collect()),
        }
    }
}

impl fmt::Display for PositionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionSelector::Absolute(p) => write!(f, "{p}"),
            PositionSelector::Verb => write!(f, "verb"),
            PositionSelector::FinalNoun => write!(f, "final_noun"),
            PositionSelector::All => write!(f, "all"),
        }
    }
}

impl FromStr for PositionSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verb" => Ok(PositionSelector::Verb),
            "final_noun" => Ok(PositionSelector::FinalNoun),
            "all" => Ok(PositionSelector::All),
            _ => s
                .parse()
                .map(PositionSelector::Absolute)
                .map_err(|_| Error::invalid(format!("unrecognised position `{s}`"))),
        }
    }
}

impl Serialize for PositionSelector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PositionSelector::Absolute(p) => s.serialize_u64(*p as u64),
            other => s.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for PositionSelector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Index(p) => Ok(PositionSelector::Absolute(p)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EditValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Replace the site activation (all of `d_model`, or by a full vector).
    SetRaw(EditValue),
    /// Replace one SAE feature before decoding.
    SetFeature { feature: usize, value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEdit {
    pub site: SubmoduleId,
    pub position: PositionSelector,
    pub mode: EditMode,
}

impl ActivationEdit {
    pub fn set_feature(site: SubmoduleId, position: PositionSelector, feature: usize, value: f64) -> Self {
        ActivationEdit {
            site,
            position,
            mode: EditMode::SetFeature { feature, value },
        }
    }

    pub fn set_raw(site: SubmoduleId, position: PositionSelector, value: EditValue) -> Self {
        ActivationEdit {
            site,
            position,
            mode: EditMode::SetRaw(value),
        }
    }
}

/// Edits of one site, keyed by flat element index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiteEdits {
    /// `position * d_model + dim` -> value
    pub raw: BTreeMap<usize, f64>,
    /// `position * d_features + feature` -> value
    pub features: BTreeMap<usize, f64>,
}

/// Edits resolved against one concrete input.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResolvedEdits {
    pub sites: BTreeMap<SubmoduleId, SiteEdits>,
}

fn insert_checked(map: &mut BTreeMap<usize, f64>, key: usize, value: f64, what: impl Fn() -> String) -> Result<()> {
    match map.insert(key, value) {
        Some(old) if old.to_bits() != value.to_bits() => Err(Error::ConflictingEdits(what())),
        _ => Ok(()),
    }
}

impl ResolvedEdits {
    pub fn is_empty(&self) -> bool {
        self.sites
            .values()
            .all(|s| s.raw.is_empty() && s.features.is_empty())
    }

    pub fn site(&self, id: &SubmoduleId) -> Option<&SiteEdits> {
        self.sites.get(id)
    }

    /// Sets one feature value; rejects a different value at the same slot.
    pub fn set_feature(
        &mut self,
        site: SubmoduleId,
        position: usize,
        feature: usize,
        d_features: usize,
        value: f64,
    ) -> Result<()> {
        if feature >= d_features {
            return Err(Error::invalid(format!(
                "feature {feature} outside dictionary of {d_features} at {site}"
            )));
        }
        let entry = self.sites.entry(site).or_default();
        insert_checked(&mut entry.features, position * d_features + feature, value, || {
            format!("{site} position {position} feature {feature}")
        })
    }

    pub fn set_raw(&mut self, site: SubmoduleId, position: usize, dim: usize, d_model: usize, value: f64) -> Result<()> {
        let entry = self.sites.entry(site).or_default();
        insert_checked(&mut entry.raw, position * d_model + dim, value, || {
            format!("{site} position {position} dimension {dim}")
        })
    }

    /// Resolves position selectors and checks every edit against the model
    /// shape. `d_features` reports the dictionary width of sites with an
    /// attached SAE.
    pub fn resolve(
        edits: &[ActivationEdit],
        ann: &Annotations,
        len: usize,
        n_layers: usize,
        d_model: usize,
        d_features: impl Fn(&SubmoduleId) -> Option<usize>,
    ) -> Result<Self> {
        let mut out = ResolvedEdits::default();
        for edit in edits {
            edit.site.validate(n_layers)?;
            let positions = edit.position.resolve(ann, len)?;
            match &edit.mode {
                EditMode::SetFeature { feature, value } => {
                    let width = d_features(&edit.site).ok_or_else(|| {
                        Error::invalid(format!("feature edit at {} without an attached SAE", edit.site))
                    })?;
                    for &p in &positions {
                        out.set_feature(edit.site, p, *feature, width, *value)?;
                    }
                }
                EditMode::SetRaw(value) => {
                    let vector: Vec<f64> = match value {
                        EditValue::Scalar(v) => vec![*v; d_model],
                        EditValue::Vector(v) if v.len() == d_model => v.clone(),
                        EditValue::Vector(v) => {
                            return Err(Error::invalid(format!(
                                "raw edit of width {} at a site of width {d_model}",
                                v.len()
                            )))
                        }
                    };
                    for &p in &positions {
                        for (dim, &v) in vector.iter().enumerate() {
                            out.set_raw(edit.site, p, dim, d_model, v)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_ids_round_trip_and_sort_in_computation_order() {
        let all = SubmoduleId::all(2);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
        for s in &all {
            assert_eq!(s.to_string().parse::<SubmoduleId>().unwrap(), *s);
        }
        assert!(SubmoduleId::residual(2).validate(2).is_err());
        assert!(SubmoduleId {
            layer: Layer::Embedding,
            kind: SiteKind::MlpOut
        }
        .validate(2)
        .is_err());
    }

    #[test]
    fn selectors_serialize_as_index_or_name() {
        let v = vec![PositionSelector::Absolute(3), PositionSelector::FinalNoun];
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"[3,"final_noun"]"#);
        assert_eq!(serde_json::from_str::<Vec<PositionSelector>>(&json).unwrap(), v);
    }

    #[test]
    fn conflicting_feature_edits_are_rejected() {
        let site = SubmoduleId::residual(0);
        let edits = vec![
            ActivationEdit::set_feature(site, PositionSelector::Absolute(1), 3, 0.0),
            ActivationEdit::set_feature(site, PositionSelector::All, 3, 1.0),
        ];
        let err = ResolvedEdits::resolve(&edits, &Annotations::default(), 4, 1, 8, |_| Some(16));
        assert!(matches!(err, Err(Error::ConflictingEdits(_))));
        let same = vec![edits[0].clone(), edits[0].clone()];
        assert!(ResolvedEdits::resolve(&same, &Annotations::default(), 4, 1, 8, |_| Some(16)).is_ok());
    }

    #[test]
    fn selectors_resolve_against_annotations() {
        let ann = Annotations {
            verb: Some(3),
            final_noun: None,
        };
        assert_eq!(PositionSelector::Verb.resolve(&ann, 6).unwrap(), vec![3]);
        assert!(PositionSelector::FinalNoun.resolve(&ann, 6).is_err());
        assert!(PositionSelector::Absolute(6).resolve(&ann, 6).is_err());
        assert_eq!(PositionSelector::All.resolve(&ann, 2).unwrap(), vec![0, 1]);
        assert!(ResolvedEdits::resolve(
            &[ActivationEdit::set_feature(SubmoduleId::EMBEDDING, PositionSelector::All, 0, 0.0)],
            &ann,
            3,
            1,
            4,
            |_| None
        )
        .is_err());
    }
}
