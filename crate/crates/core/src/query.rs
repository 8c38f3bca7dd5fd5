//! Text-promptable querying against decoded feature renders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_PHRASES: [&str; 4] = ["object", "things", "stuff", "texture"];
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Precomputed text embeddings standing in for a live text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryLexicon {
    pub canonical: BTreeMap<String, Vec<f64>>,
    pub prompts: BTreeMap<String, Vec<f64>>,
}

fn normalized(name: &str, mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::invalid(format!("embedding for {name:?} has norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

impl QueryLexicon {
    /// Normalizes every entry and checks that the canonical set is complete
    /// and dimensions agree.
    pub fn new(
        canonical: impl IntoIterator<Item = (String, Vec<f64>)>,
        prompts: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self> {
        let canonical = canonical
            .into_iter()
            .map(|(k, v)| Ok((k.clone(), normalized(&k, v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let prompts = prompts
            .into_iter()
            .map(|(k, v)| Ok((k.clone(), normalized(&k, v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        for phrase in CANONICAL_PHRASES {
            if !canonical.contains_key(phrase) {
                return Err(Error::MissingCanonical(phrase.to_string()));
            }
        }
        let lex = Self { canonical, prompts };
        let dim = lex.dim();
        for (k, v) in lex.canonical.iter().chain(&lex.prompts) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    field: format!("lexicon entry {k:?}"),
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        Ok(lex)
    }

    pub fn dim(&self) -> usize {
        self.canonical[CANONICAL_PHRASES[0]].len()
    }

    /// Canonical embeddings in the fixed phrase order.
    pub fn canonical_set(&self) -> Vec<&[f64]> {
        CANONICAL_PHRASES
            .iter()
            .map(|p| self.canonical[*p].as_slice())
            .collect()
    }

    /// Looks up a prompt, suggesting the closest keys when absent.
    pub fn resolve(&self, prompt: &str) -> Result<&[f64]> {
        if let Some(v) = self.prompts.get(prompt) {
            return Ok(v);
        }
        let mut ranked: Vec<(usize, &String)> = self.prompts.keys().map(|k| (edit_distance(prompt, k), k)).collect();
        ranked.sort();
        Err(Error::UnknownPrompt {
            prompt: prompt.to_string(),
            suggestions: ranked.into_iter().take(3).map(|(_, k)| k.clone()).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: QueryLexicon = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::new(raw.canonical, raw.prompts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("lexicon serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Levenshtein distance over chars.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise softmax of the prompt against its strongest canonical rival.
pub fn relevancy_score(image: &[f64], text: &[f64], canon: &[&[f64]]) -> f64 {
    let s = dot(image, text);
    canon
        .iter()
        .map(|c| 1.0 / (1.0 + (dot(image, c) - s).exp()))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub prompt: String,
    pub threshold: f64,
    pub width: usize,
    pub height: usize,
    pub relevancy: Vec<f64>,
    pub mask: Vec<bool>,
}

impl QueryResult {
    /// Scores decoded per-pixel embeddings (H×W×D_f, unit or zero rows).
    pub fn from_embeddings(
        prompt: &str,
        text: &[f64],
        canon: &[&[f64]],
        embeddings: &[f64],
        width: usize,
        height: usize,
        threshold: f64,
    ) -> Self {
        let df = text.len();
        let relevancy: Vec<f64> = embeddings.chunks(df).map(|e| relevancy_score(e, text, canon)).collect();
        let mask = relevancy.iter().map(|&s| s >= threshold).collect();
        debug_assert_eq!(relevancy.len(), width * height);
        Self {
            prompt: prompt.to_string(),
            threshold,
            width,
            height,
            relevancy,
            mask,
        }
    }

    pub fn mask_consistent(&self) -> bool {
        self.relevancy
            .iter()
            .zip(&self.mask)
            .all(|(&s, &m)| m == (s >= self.threshold))
    }

    pub fn score_stats(&self) -> ScoreStats {
        let n = self.relevancy.len().max(1) as f64;
        ScoreStats {
            min: self.relevancy.iter().copied().fold(f64::INFINITY, f64::min),
            max: self.relevancy.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: self.relevancy.iter().sum::<f64>() / n,
            coverage: self.mask.iter().filter(|&&m| m).count() as f64 / n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// fraction of pixels in the mask
    pub coverage: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(i: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    fn canon(n: usize) -> Vec<(String, Vec<f64>)> {
        CANONICAL_PHRASES
            .iter()
            .enumerate()
            .map(|(i, p)| (p.to_string(), basis(i + 2, n)))
            .collect()
    }

    #[test]
    fn missing_canonical_named() {
        let mut c = canon(8);
        c.retain(|(k, _)| k != "stuff");
        match QueryLexicon::new(c, vec![]) {
            Err(Error::MissingCanonical(p)) => assert_eq!(p, "stuff"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn entries_normalized() {
        let lex = QueryLexicon::new(
            canon(8),
            vec![("liver".into(), vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(lex.prompts["liver"][0], 1.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.json");
        let lex = QueryLexicon::new(
            canon(8),
            vec![("fat".into(), vec![0.3, 0.1, 0.0, 0.2, 0.5, 0.0, 0.1, 0.9])],
        )
        .unwrap();
        lex.save(&p).unwrap();
        let back = QueryLexicon::load(&p).unwrap();
        for (k, v) in &lex.prompts {
            for (a, b) in v.iter().zip(&back.prompts[k]) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn unknown_prompt_suggests() {
        let lex = QueryLexicon::new(
            canon(8),
            vec![("liver".into(), basis(0, 8)), ("grasper".into(), basis(1, 8))],
        )
        .unwrap();
        match lex.resolve("livr") {
            Err(Error::UnknownPrompt { suggestions, .. }) => assert_eq!(suggestions[0], "liver"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn score_closed_forms() {
        let t = basis(0, 6);
        let cs: Vec<Vec<f64>> = (1..5).map(|i| basis(i, 6)).collect();
        let refs: Vec<&[f64]> = cs.iter().map(|v| v.as_slice()).collect();
        assert!((relevancy_score(&[0.0; 6], &t, &refs) - 0.5).abs() < 1e-15);
        // dots (1, −1, −1, −1) need canonicals antiparallel to the image
        let img = basis(0, 6);
        let neg: Vec<Vec<f64>> = (0..4).map(|_| basis(0, 6).iter().map(|v| -v).collect()).collect();
        let refs: Vec<&[f64]> = neg.iter().map(|v| v.as_slice()).collect();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((relevancy_score(&img, &t, &refs) - expected).abs() < 1e-12);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
    }
}
