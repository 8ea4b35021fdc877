use std::path::Path;

use super::{AttributionScore, EdgeScore, FeatureCoord, Method};
use crate::error::{Error, Result};

pub const SCORE_HEADER: &str = "site\tfeature\tposition\tscore\tmethod\tn_examples";
pub const EDGE_HEADER: &str =
    "src_site\tsrc_feature\tsrc_position\tdst_site\tdst_feature\tdst_position\tscore\tmethod\tn_examples";

fn coord_cols(c: &FeatureCoord) -> String {
    format!("{}\t{}\t{}", c.site, c.feature, c.position)
}

fn parse_coord(cols: &[&str]) -> Result<FeatureCoord> {
    Ok(FeatureCoord::new(
        cols[0].parse()?,
        cols[1].parse().map_err(|_| Error::invalid(format!("bad feature index `{}`", cols[1])))?,
        cols[2].parse()?,
    ))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::invalid(format!("bad {what} `{s}`")))
}

/// Scores print with the shortest representation that reads back exactly.
pub fn scores_to_tsv(scores: &[AttributionScore]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for s in scores {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", coord_cols(&s.coord), s.score, s.method, s.n_examples));
    }
    out
}

fn rows<'a>(text: &'a str, header: &str, n_cols: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        _ => return Err(Error::invalid(format!("expected header `{header}`"))),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != n_cols {
                return Err(Error::invalid(format!("line {}: expected {n_cols} columns", i + 1)));
            }
            Ok((i, cols))
        })
        .collect()
}

pub fn scores_from_tsv(text: &str) -> Result<Vec<AttributionScore>> {
    rows(text, SCORE_HEADER, 6)?
        .into_iter()
        .map(|(_, c)| {
            Ok(AttributionScore {
                coord: parse_coord(&c[..3])?,
                score: parse_num(c[3], "score")?,
                method: c[4].parse::<Method>()?,
                n_examples: parse_num(c[5], "example count")?,
            })
        })
        .collect()
}

pub fn edges_to_tsv(edges: &[EdgeScore]) -> String {
    let mut out = String::from(EDGE_HEADER);
    out.push('\n');
    for e in edges {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            coord_cols(&e.src),
            coord_cols(&e.dst),
            e.score,
            e.method,
            e.n_examples
        ));
    }
    out
}

pub fn edges_from_tsv(text: &str) -> Result<Vec<EdgeScore>> {
    rows(text, EDGE_HEADER, 9)?
        .into_iter()
        .map(|(_, c)| {
            Ok(EdgeScore {
                src: parse_coord(&c[..3])?,
                dst: parse_coord(&c[3..6])?,
                score: parse_num(c[6], "score")?,
                method: c[7].parse::<Method>()?,
                n_examples: parse_num(c[8], "example count")?,
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

pub fn read_scores(path: &Path) -> Result<Vec<AttributionScore>> {
    scores_from_tsv(&read(path)?)
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeScore>> {
    edges_from_tsv(&read(path)?)
}
