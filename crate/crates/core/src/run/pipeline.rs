use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{Manifest, RunConfig};
use crate::attribution::{
    node_and_edge_scores, node_scores, read_edges, read_scores, scores_to_tsv, edges_to_tsv, AttributionScore,
    FeatureCoord, FeatureMetric, FeatureTerm, Method, Objective, ScoreOptions,
};
use crate::circuits::{
    circuit_iou, extract_circuit, faithfulness, faithfulness_sweep, feature_activation_stats, feature_recall, Circuit,
    FaithfulnessOptions, FaithfulnessReport, GroupActivation, Iou, NodeGroup, SweepPoint,
};
use crate::error::{Error, Result};
use crate::interventions::{attributed_plan, run_intervention, top_signed, InterventionPlan, InterventionReport};
use crate::model::{
    mean_cross_entropy, train_lm, unigram_cross_entropy, Example, LmTrainReport, MetricMode, MetricSpec,
    PositionSelector, SubmoduleId, TransformerModel, Vocab,
};
use crate::numerics::{container, rng, Tensor};
use crate::probe::{eval_probe, probe_reading, random_baseline, train_probe, ActionProbe, DepTree, ProbeEval, ProbeObjective};
use crate::sae::{collect_activations, train_sae, SaeMetrics, SaeParams, SaeSet, SplicedModel};
use crate::stimuli::{
    behavior_to_tsv, behavioral_eval, corpus_to_string, default_templates, generate_corpus, generate_stimuli,
    read_stimuli, read_treebank, write_stimuli, write_treebank, Condition, GrammarSpec, Stimulus, Structure,
};

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn grammar(&self) -> PathBuf {
        self.file("grammar.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.file("corpus.txt")
    }
    pub fn treebank(&self) -> PathBuf {
        self.file("treebank.tsv")
    }
    pub fn stimuli(&self) -> PathBuf {
        self.file("stimuli.tsv")
    }
    pub fn lm(&self) -> PathBuf {
        self.file("lm.sfct")
    }
    pub fn lm_report(&self) -> PathBuf {
        self.file("lm_report.json")
    }
    pub fn acts(&self, site: SubmoduleId) -> PathBuf {
        self.root.join("acts").join(format!("{site}.sfct"))
    }
    pub fn sae(&self, site: SubmoduleId) -> PathBuf {
        self.root.join("sae").join(format!("{site}.sfct"))
    }
    pub fn sae_metrics(&self, site: SubmoduleId) -> PathBuf {
        self.root.join("sae").join(format!("{site}.metrics.json"))
    }
    pub fn behavior(&self) -> PathBuf {
        self.file("behavior.tsv")
    }
    pub fn scores(&self) -> PathBuf {
        self.file("scores.tsv")
    }
    pub fn edges(&self) -> PathBuf {
        self.file("edges.tsv")
    }
    pub fn circuit(&self) -> PathBuf {
        self.file("circuit.json")
    }
    pub fn faithfulness(&self) -> PathBuf {
        self.file("faithfulness.json")
    }
    pub fn intervention(&self) -> PathBuf {
        self.file("intervention.json")
    }
    pub fn probe(&self, site: SubmoduleId) -> PathBuf {
        self.root.join("probes").join(format!("{site}.sfct"))
    }
    pub fn probe_eval(&self) -> PathBuf {
        self.file("probe_eval.tsv")
    }
    pub fn probe_reading(&self) -> PathBuf {
        self.file("probe_reading.tsv")
    }
    pub fn probe_recall(&self) -> PathBuf {
        self.file("probe_recall.tsv")
    }
    pub fn comparison(&self) -> PathBuf {
        self.file("circuit_comparison.json")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.md")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

/// Target of the `attribute` stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricChoice {
    /// `p(GP) - p(non-GP)` (or the logit difference) of the configured stimuli.
    Tokens,
    /// Sum of the last spliced site's features at the last position. Linear
    /// in every feature it scores, so every method returns the exact effect.
    LinearTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub train: LmTrainReport,
    pub heldout_cross_entropy: f64,
    pub unigram_cross_entropy: f64,
    pub n_train: usize,
    pub n_heldout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessOutput {
    pub circuit: String,
    pub n_nodes: usize,
    pub report: FaithfulnessReport,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutput {
    pub plan: InterventionPlan,
    pub report: InterventionReport,
    pub ratio: f64,
    pub sign_flipped: bool,
    /// Activation of the top promoting and opposing features on the
    /// unedited stimuli.
    pub activation_stats: Vec<GroupActivation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecall {
    pub site: SubmoduleId,
    pub n_circuit: usize,
    pub n_universe: usize,
    pub recall: f64,
    pub random_recall: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitComparison {
    pub a: String,
    pub b: String,
    pub match_position: bool,
    pub iou: Iou,
}

/// Number of random draws behind the chance level of probe-feature recall.
pub const RECALL_DRAWS: usize = 1000;

/// Recall of `circuit` among the `|circuit|` highest-`|score|` coordinates
/// of `probe_scores`, with its chance level over `draws` uniform draws of
/// the same size from every scored coordinate.
pub fn probe_feature_recall(
    circuit: &BTreeSet<FeatureCoord>,
    probe_scores: &[AttributionScore],
    draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut ranked: Vec<&AttributionScore> = probe_scores.iter().collect();
    ranked.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()).then(a.coord.cmp(&b.coord)));
    let n = circuit.len();
    if n > ranked.len() {
        return Err(Error::invalid("circuit is larger than the scored feature set"));
    }
    let top: BTreeSet<FeatureCoord> = ranked.iter().take(n).map(|s| s.coord).collect();
    let recall = feature_recall(circuit, &top)?;
    let mut r = rng(seed);
    let mut total = 0.0;
    for _ in 0..draws {
        let drawn: BTreeSet<FeatureCoord> = sample(&mut r, ranked.len(), n).into_iter().map(|i| ranked[i].coord).collect();
        total += feature_recall(circuit, &drawn)?;
    }
    Ok((recall, total / draws.max(1) as f64))
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let layout = Layout::new(cfg.output_dir.clone());
        Pipeline { cfg, layout }
    }

    fn root(&self) -> &Path {
        &self.layout.root
    }

    fn start(&self, command: &str) -> Manifest {
        Manifest::new(command, &self.cfg)
    }

    fn finish(&self, mut m: Manifest, outputs: &[PathBuf]) -> Result<Manifest> {
        for p in outputs {
            m.output(self.root(), p)?;
        }
        m.save(&self.layout.manifest(&m.command))?;
        Ok(m)
    }

    fn grammar(&self, m: &mut Manifest) -> Result<GrammarSpec> {
        let p = self.layout.grammar();
        let g: GrammarSpec = read_json(&p)?;
        m.input(self.root(), &p)?;
        Ok(g)
    }

    fn trees(&self, m: &mut Manifest) -> Result<Vec<DepTree>> {
        let p = self.layout.treebank();
        let t = read_treebank(&p)?;
        m.input(self.root(), &p)?;
        Ok(t)
    }

    fn stimuli(&self, m: &mut Manifest) -> Result<Vec<Stimulus>> {
        let p = self.layout.stimuli();
        let s = read_stimuli(&p)?;
        m.input(self.root(), &p)?;
        Ok(s)
    }

    fn model(&self, m: &mut Manifest) -> Result<TransformerModel> {
        let p = self.layout.lm();
        let model = TransformerModel::load(&p)?;
        m.input(self.root(), &p)?;
        m.input(self.root(), &sidecar(&p))?;
        Ok(model)
    }

    fn saes(&self, m: &mut Manifest) -> Result<SaeSet> {
        let mut set = SaeSet::new();
        for site in self.cfg.sae.sites(self.cfg.model.n_layers) {
            let p = self.layout.sae(site);
            set.insert(SaeParams::load(&p)?)?;
            m.input(self.root(), &p)?;
            m.input(self.root(), &sidecar(&p))?;
        }
        Ok(set)
    }

    fn scores(&self, m: &mut Manifest) -> Result<Vec<AttributionScore>> {
        let p = self.layout.scores();
        let s = read_scores(&p)?;
        m.input(self.root(), &p)?;
        Ok(s)
    }

    fn probe(&self, site: SubmoduleId, m: &mut Manifest) -> Result<ActionProbe> {
        let p = self.layout.probe(site);
        let probe = ActionProbe::load(&p)?;
        m.input(self.root(), &p)?;
        m.input(self.root(), &sidecar(&p))?;
        Ok(probe)
    }

    fn corpus(vocab: &Vocab, trees: &[DepTree]) -> Result<Vec<Vec<usize>>> {
        trees.iter().map(|t| vocab.encode_words(&t.tokens)).collect()
    }

    /// `(lm train, probe train, held out)` slices of the treebank.
    fn splits<'a>(&self, trees: &'a [DepTree]) -> Result<(&'a [DepTree], &'a [DepTree], &'a [DepTree])> {
        let p = &self.cfg.probe;
        if p.n_train + p.n_test > trees.len() {
            return Err(Error::invalid(format!(
                "treebank has {} sentences, probes need {}",
                trees.len(),
                p.n_train + p.n_test
            )));
        }
        let held = trees.len() - p.n_test;
        Ok((&trees[..held], &trees[..p.n_train], &trees[held..]))
    }

    /// Stimuli of one structure and condition as examples, with the metric
    /// of the first one.
    pub fn dataset(
        vocab: &Vocab,
        stimuli: &[Stimulus],
        structure: Structure,
        condition: Condition,
        mode: MetricMode,
    ) -> Result<(Vec<Example>, MetricSpec)> {
        let chosen: Vec<&Stimulus> = stimuli
            .iter()
            .filter(|s| s.structure == structure && s.condition == condition)
            .collect();
        let first = chosen
            .first()
            .ok_or_else(|| Error::invalid(format!("no {structure} {condition} stimuli")))?;
        let metric = first.metric(vocab, mode)?;
        let examples = chosen.iter().map(|s| s.to_example(vocab)).collect::<Result<_>>()?;
        Ok((examples, metric))
    }

    pub fn gen_grammar(&self) -> Result<Manifest> {
        let mut m = self.start("gen-grammar");
        let s = &self.cfg.stimuli;
        m.seed("grammar_seed", s.grammar_seed);
        m.seed("stimulus_seed", s.stimulus_seed);
        let g = GrammarSpec::toy(s.grammar_seed);
        let trees = generate_corpus(&g, s.n_sentences)?;
        let stimuli = generate_stimuli(&default_templates(&g)?, &g, s.n_per_structure, s.stimulus_seed)?;
        let longest = trees.iter().map(|t| t.len() + 1).chain(stimuli.iter().map(|s| s.words.len() + 1)).max();
        if longest.is_some_and(|l| l > self.cfg.model.max_seq_len) {
            return Err(Error::Config(vec![format!(
                "model.max_seq_len {} is shorter than the longest sequence {}",
                self.cfg.model.max_seq_len,
                longest.unwrap_or(0)
            )]));
        }
        let l = &self.layout;
        write_json(&l.grammar(), &g)?;
        write(&l.corpus(), &corpus_to_string(&trees))?;
        std::fs::create_dir_all(self.root())?;
        write_treebank(&l.treebank(), &trees)?;
        write_stimuli(&l.stimuli(), &stimuli)?;
        self.finish(m, &[l.grammar(), l.corpus(), l.treebank(), l.stimuli()])
    }

    pub fn train_lm(&self) -> Result<Manifest> {
        let mut m = self.start("train-lm");
        m.seed("model.rng_seed", self.cfg.model.rng_seed);
        m.seed("lm.rng_seed", self.cfg.lm.rng_seed);
        let g = self.grammar(&mut m)?;
        let vocab = g.vocab();
        let trees = self.trees(&mut m)?;
        let (train, _, held) = self.splits(&trees)?;
        let train_c = Self::corpus(&vocab, train)?;
        let held_c = Self::corpus(&vocab, held)?;
        let init = TransformerModel::new(self.cfg.model.model_config(vocab.len()), vocab.clone())?;
        let (model, report) = train_lm(&init, &train_c, &self.cfg.lm)?;
        if let Some(why) = &report.diverged {
            return Err(Error::Numerical(format!("language model training diverged: {why}")));
        }
        let summary = LmSummary {
            heldout_cross_entropy: mean_cross_entropy(&model, &held_c)?,
            unigram_cross_entropy: unigram_cross_entropy(&train_c, &held_c, vocab.len()),
            n_train: train_c.len(),
            n_heldout: held_c.len(),
            train: report,
        };
        let l = &self.layout;
        std::fs::create_dir_all(self.root())?;
        model.save(&l.lm())?;
        write_json(&l.lm_report(), &summary)?;
        self.finish(m, &[l.lm(), sidecar(&l.lm()), l.lm_report()])
    }

    pub fn collect_acts(&self) -> Result<Manifest> {
        let mut m = self.start("collect-acts");
        let model = self.model(&mut m)?;
        let trees = self.trees(&mut m)?;
        let n = self.cfg.sae.n_sentences.min(trees.len());
        let corpus = Self::corpus(&model.vocab, &trees[..n])?;
        let mut outputs = Vec::new();
        for site in self.cfg.sae.sites(self.cfg.model.n_layers) {
            let acts = collect_activations(&model, &corpus, site)?;
            let p = self.layout.acts(site);
            container::save(&p, &[("acts".to_string(), acts)].into_iter().collect())?;
            outputs.push(p);
        }
        self.finish(m, &outputs)
    }

    pub fn train_sae(&self) -> Result<Manifest> {
        let mut m = self.start("train-sae");
        m.seed("sae.train.rng_seed", self.cfg.sae.train.rng_seed);
        let mut outputs = Vec::new();
        for site in self.cfg.sae.sites(self.cfg.model.n_layers) {
            let ap = self.layout.acts(site);
            let mut tensors = container::load(&ap)?;
            m.input(self.root(), &ap)?;
            let acts: Tensor = tensors
                .remove("acts")
                .ok_or_else(|| Error::Container(format!("{} has no `acts` tensor", ap.display())))?;
            let (sae, metrics): (SaeParams, SaeMetrics) = train_sae(&acts, site, &self.cfg.sae.train)?;
            if !metrics.loss.is_finite() {
                return Err(Error::Numerical(format!("SAE at {site} reached loss {}", metrics.loss)));
            }
            let p = self.layout.sae(site);
            sae.save(&p)?;
            write_json(&self.layout.sae_metrics(site), &metrics)?;
            outputs.extend([p.clone(), sidecar(&p), self.layout.sae_metrics(site)]);
        }
        self.finish(m, &outputs)
    }

    pub fn behavioral(&self) -> Result<Manifest> {
        let mut m = self.start("behavioral");
        let model = self.model(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let rows = behavioral_eval(&model, &stimuli)?;
        write(&self.layout.behavior(), &behavior_to_tsv(&rows))?;
        self.finish(m, &[self.layout.behavior()])
    }

    fn attribution_options(&self, method: Method) -> ScoreOptions {
        let a = &self.cfg.attribution;
        ScoreOptions::new(method).with_k(a.k).with_rule(a.rule)
    }

    pub fn attribute(&self, metric: MetricChoice) -> Result<Manifest> {
        let mut m = self.start("attribute");
        let model = self.model(&mut m)?;
        let saes = self.saes(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let sm = SplicedModel::new(&model, &saes)?;
        let a = &self.cfg.attribution;
        let (data, spec) = Self::dataset(&model.vocab, &stimuli, a.structure, a.condition, a.metric)?;
        let sites: Vec<SubmoduleId> = saes.sites().collect();
        let (nodes, edges) = match metric {
            MetricChoice::Tokens => {
                let pairs: Vec<(SubmoduleId, SubmoduleId)> = if a.edges {
                    sites.windows(2).map(|w| (w[0], w[1])).collect()
                } else {
                    Vec::new()
                };
                node_and_edge_scores(&sm, &spec, &data, &self.attribution_options(a.method), &pairs)?
            }
            MetricChoice::LinearTest => {
                let site = *sites.last().ok_or_else(|| Error::invalid("no spliced sites"))?;
                let obj = linear_test_metric(&sm, site, data[0].tokens.len())?;
                let opts = self.attribution_options(a.method).with_sites(vec![site]);
                (node_scores(&sm, &obj, &data, &opts)?, Vec::new())
            }
        };
        write(&self.layout.scores(), &scores_to_tsv(&nodes))?;
        write(&self.layout.edges(), &edges_to_tsv(&edges))?;
        self.finish(m, &[self.layout.scores(), self.layout.edges()])
    }

    pub fn extract_circuit(&self, out: Option<&Path>) -> Result<Manifest> {
        let mut m = self.start("extract-circuit");
        let nodes = self.scores(&mut m)?;
        let ep = self.layout.edges();
        let edges = read_edges(&ep)?;
        m.input(self.root(), &ep)?;
        let c = &self.cfg.circuit;
        let a = &self.cfg.attribution;
        let circuit = extract_circuit(&nodes, &edges, c.node_threshold, c.edge_threshold)?
            .with_free_sites(c.free_sites.sites(self.cfg.model.n_layers))
            .with_provenance(
                format!("{:?}", a.metric).to_lowercase(),
                format!("{} {} x{}", a.structure, a.condition, nodes.first().map_or(0, |n| n.n_examples)),
            );
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| self.layout.circuit());
        circuit.save(&path)?;
        let dot = path.with_extension("dot");
        write(&dot, &circuit.to_dot())?;
        self.finish(m, &[path, dot])
    }

    pub fn faithfulness(&self, circuit_path: Option<&Path>) -> Result<Manifest> {
        let mut m = self.start("faithfulness");
        let model = self.model(&mut m)?;
        let saes = self.saes(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let cp = circuit_path.map(Path::to_path_buf).unwrap_or_else(|| self.layout.circuit());
        let circuit = Circuit::load(&cp)?;
        m.input(self.root(), &cp)?;
        let nodes = self.scores(&mut m)?;
        let ep = self.layout.edges();
        let edges = read_edges(&ep)?;
        m.input(self.root(), &ep)?;
        let sm = SplicedModel::new(&model, &saes)?;
        let a = &self.cfg.attribution;
        let (data, spec) = Self::dataset(&model.vocab, &stimuli, a.structure, a.condition, MetricMode::LogitDiff)?;
        let opts = FaithfulnessOptions {
            denominator_floor: self.cfg.circuit.denominator_floor,
        };
        let report = faithfulness(&sm, &circuit, &data, &spec, &opts)?;
        let sweep = faithfulness_sweep(
            &sm,
            &nodes,
            &edges,
            &self.cfg.circuit.sweep,
            &circuit.metadata.free_sites,
            &data,
            &spec,
            &opts,
        )?;
        let out = FaithfulnessOutput {
            circuit: cp.strip_prefix(self.root()).unwrap_or(&cp).to_string_lossy().into_owned(),
            n_nodes: circuit.nodes.len(),
            report,
            sweep,
        };
        write_json(&self.layout.faithfulness(), &out)?;
        self.finish(m, &[self.layout.faithfulness()])
    }

    pub fn intervene(&self) -> Result<Manifest> {
        let mut m = self.start("intervene");
        let i = &self.cfg.intervention;
        m.seed("intervention.control_seed", i.control_seed);
        let model = self.model(&mut m)?;
        let saes = self.saes(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let scores = self.scores(&mut m)?;
        let sm = SplicedModel::new(&model, &saes)?;
        let (data, spec) = Self::dataset(&model.vocab, &stimuli, i.structure, i.condition, MetricMode::ProbDiff)?;
        let ex = &data[0];
        let pos = PositionSelector::Absolute(i.position.resolve(&ex.annotations, ex.tokens.len())?[0]);
        let mut plan = attributed_plan(&scores, i.n_promoting, i.n_opposing, pos, &saes)?;
        if let Some(v) = i.high_clamp {
            for g in plan.groups.iter_mut().filter(|g| g.clamp_value > 0.0) {
                g.clamp_value = v;
            }
        }
        plan.control_seed = i.control_seed;
        let seeds: Vec<u64> = (0..i.n_control_seeds as u64).map(|k| i.control_seed + k).collect();
        let report = run_intervention(&sm, &plan, &data, &spec, &seeds)?;
        let (pro, anti) = top_signed(&scores, i.n_promoting.max(i.n_opposing), pos);
        let groups = [("promoting", pro), ("opposing", anti)]
            .into_iter()
            .filter(|(_, members)| !members.is_empty())
            .map(|(label, members)| NodeGroup {
                label: label.into(),
                members,
            })
            .collect::<Vec<_>>();
        let activation_stats = feature_activation_stats(&sm, &data, &groups, &[])?;
        let out = InterventionOutput {
            ratio: report.ratio(),
            sign_flipped: report.sign_flipped(),
            plan,
            report,
            activation_stats,
        };
        write_json(&self.layout.intervention(), &out)?;
        self.finish(m, &[self.layout.intervention()])
    }

    pub fn probe_train(&self) -> Result<Manifest> {
        let mut m = self.start("probe-train");
        m.seed("probe.train.rng_seed", self.cfg.probe.train.rng_seed);
        let model = self.model(&mut m)?;
        let trees = self.trees(&mut m)?;
        let (_, train, _) = self.splits(&trees)?;
        let mut outputs = Vec::new();
        for site in self.cfg.probe.sites(self.cfg.model.n_layers) {
            let probe = train_probe(&model, train, site, &self.cfg.probe.train)?;
            let p = self.layout.probe(site);
            probe.save(&p)?;
            outputs.extend([p.clone(), sidecar(&p)]);
        }
        self.finish(m, &outputs)
    }

    pub fn probe_eval(&self) -> Result<Manifest> {
        let mut m = self.start("probe-eval");
        m.seed("probe.baseline_seed", self.cfg.probe.baseline_seed);
        let model = self.model(&mut m)?;
        let trees = self.trees(&mut m)?;
        let (_, _, test) = self.splits(&trees)?;
        let mut rows: Vec<(SubmoduleId, ProbeEval, ProbeEval)> = Vec::new();
        for site in self.cfg.probe.sites(self.cfg.model.n_layers) {
            let probe = self.probe(site, &mut m)?;
            let ev = eval_probe(&probe, &model, test)?;
            let rb = random_baseline(&model, test, site, self.cfg.probe.baseline_seed)?;
            rows.push((site, ev, rb));
        }
        write(&self.layout.probe_eval(), &probe_eval_to_tsv(&rows))?;
        self.finish(m, &[self.layout.probe_eval()])
    }

    pub fn probe_reading(&self) -> Result<Manifest> {
        let mut m = self.start("probe-reading");
        let model = self.model(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let mut text = String::from("site\tstructure\tcondition\tn\tp_left_arc\tp_right_arc\tp_gen\n");
        for site in self.cfg.probe.sites(self.cfg.model.n_layers) {
            let probe = self.probe(site, &mut m)?;
            for structure in Structure::ALL {
                for condition in Condition::ALL {
                    let Ok((data, _)) = Self::dataset(&model.vocab, &stimuli, structure, condition, MetricMode::ProbDiff) else {
                        continue;
                    };
                    let mut sum = [0.0; 3];
                    for ex in &data {
                        let p = probe_reading(&model, &probe, ex)?;
                        for k in 0..3 {
                            sum[k] += p[k];
                        }
                    }
                    let n = data.len() as f64;
                    let _ = writeln!(
                        text,
                        "{site}\t{structure}\t{condition}\t{}\t{:.9}\t{:.9}\t{:.9}",
                        data.len(),
                        sum[0] / n,
                        sum[1] / n,
                        sum[2] / n
                    );
                }
            }
        }
        write(&self.layout.probe_reading(), &text)?;
        self.finish(m, &[self.layout.probe_reading()])
    }

    /// With two circuit files, their IoU. Without, the recall of the main
    /// circuit's features among each probe's top attributed features.
    pub fn compare_circuits(&self, pair: Option<(&Path, &Path)>, match_position: bool) -> Result<Manifest> {
        let mut m = self.start("compare-circuits");
        if let Some((a, b)) = pair {
            let (ca, cb) = (Circuit::load(a)?, Circuit::load(b)?);
            m.input(self.root(), a)?;
            m.input(self.root(), b)?;
            let out = CircuitComparison {
                a: a.to_string_lossy().into_owned(),
                b: b.to_string_lossy().into_owned(),
                match_position,
                iou: circuit_iou(&ca, &cb, match_position),
            };
            write_json(&self.layout.comparison(), &out)?;
            return self.finish(m, &[self.layout.comparison()]);
        }
        m.seed("recall_draws_seed", self.cfg.probe.baseline_seed);
        let model = self.model(&mut m)?;
        let saes = self.saes(&mut m)?;
        let stimuli = self.stimuli(&mut m)?;
        let cp = self.layout.circuit();
        let circuit = Circuit::load(&cp)?;
        m.input(self.root(), &cp)?;
        let sm = SplicedModel::new(&model, &saes)?;
        let a = &self.cfg.attribution;
        let (data, _) = Self::dataset(&model.vocab, &stimuli, a.structure, a.condition, a.metric)?;
        let mut rows = Vec::new();
        for site in self.cfg.probe.sites(self.cfg.model.n_layers) {
            if saes.get(&site).is_none() {
                continue;
            }
            let probe = self.probe(site, &mut m)?;
            let fc: BTreeSet<FeatureCoord> = circuit.coords().into_iter().filter(|c| c.site == site).collect();
            if fc.is_empty() {
                continue;
            }
            let obj = ProbeObjective::new(probe);
            let opts = self.attribution_options(self.cfg.probe.recall_method).with_sites(vec![site]);
            let ps = node_scores(&sm, &obj as &dyn Objective, &data, &opts)?;
            let (recall, random_recall) = probe_feature_recall(&fc, &ps, RECALL_DRAWS, self.cfg.probe.baseline_seed)?;
            rows.push(ProbeRecall {
                site,
                n_circuit: fc.len(),
                n_universe: ps.len(),
                recall,
                random_recall,
                ratio: recall / random_recall,
            });
        }
        let mut text = String::from("site\tn_circuit\tn_universe\trecall\trandom_recall\tratio\n");
        for r in &rows {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{:.9}\t{:.9}\t{:.6}",
                r.site, r.n_circuit, r.n_universe, r.recall, r.random_recall, r.ratio
            );
        }
        write(&self.layout.probe_recall(), &text)?;
        self.finish(m, &[self.layout.probe_recall()])
    }

    pub fn report(&self) -> Result<Manifest> {
        let mut m = self.start("report");
        let text = super::report::render(self, &mut m)?;
        write(&self.layout.report(), &text)?;
        self.finish(m, &[self.layout.report()])
    }

    /// Every stage in dependency order.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Ok(vec![
            self.gen_grammar()?,
            self.train_lm()?,
            self.collect_acts()?,
            self.train_sae()?,
            self.behavioral()?,
            self.attribute(MetricChoice::Tokens)?,
            self.extract_circuit(None)?,
            self.faithfulness(None)?,
            self.intervene()?,
            self.probe_train()?,
            self.probe_eval()?,
            self.probe_reading()?,
            self.compare_circuits(None, true)?,
            self.report()?,
        ])
    }
}

/// Sum of every feature at `site` and the last of `len` positions.
pub fn linear_test_metric(sm: &SplicedModel<'_>, site: SubmoduleId, len: usize) -> Result<FeatureMetric> {
    let width = sm.d_features(&site)?;
    Ok(FeatureMetric {
        site,
        terms: (0..width)
            .map(|feature| FeatureTerm {
                position: len - 1,
                feature,
                linear: 1.0,
                quadratic: 0.0,
            })
            .collect(),
    })
}

pub fn probe_eval_to_tsv(rows: &[(SubmoduleId, ProbeEval, ProbeEval)]) -> String {
    let mut s = String::from(
        "site\taction_accuracy\tuas\tuuas\tfailures\trandom_action_accuracy\trandom_uas\trandom_uuas\tn_sentences\n",
    );
    for (site, e, r) in rows {
        let _ = writeln!(
            s,
            "{site}\t{:.9}\t{:.9}\t{:.9}\t{}\t{:.9}\t{:.9}\t{:.9}\t{}",
            e.action_accuracy, e.uas, e.uuas, e.failures, r.action_accuracy, r.uas, r.uuas, e.n_sentences
        );
    }
    s
}
