//! 1:1 verification accuracy with ten-fold threshold selection, averaged
//! over test sets and compared against a real-data baseline.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{cosine_similarity, EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::manifest::TOOL_VERSION;
use crate::toy::{render_toy_corpus, subject_dir, ToySpec};

pub const FOLDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: PathBuf,
    pub b: PathBuf,
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairList {
    pub name: String,
    pub pairs: Vec<Pair>,
}

impl PairList {
    /// Parses `<path_a>\t<path_b>\t<0|1>` lines; relative paths are joined onto `root`.
    pub fn parse(text: &str, name: &str, root: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [a, b, flag] = fields[..] else {
                return Err(Error::Format(format!("line {}: expected 3 tab-separated fields", no + 1)));
            };
            let same = match flag.trim() {
                "1" => true,
                "0" => false,
                other => return Err(Error::Format(format!("line {}: label {other:?} is not 0 or 1", no + 1))),
            };
            pairs.push(Pair {
                a: root.join(a),
                b: root.join(b),
                same,
            });
        }
        if pairs.is_empty() {
            return Err(validation(format!("pair list {name} is empty")));
        }
        Ok(Self {
            name: name.to_string(),
            pairs,
        })
    }

    /// Reads a pair file; the set is named after the file stem.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "pairs".into());
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &name, &root)
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same).collect()
    }
}

/// Fold of pair `i` out of `n`: contiguous blocks whose sizes differ by at most one.
pub fn fold_of(i: usize, n: usize) -> usize {
    (0..FOLDS).find(|&k| i < (k + 1) * n / FOLDS).unwrap_or(FOLDS - 1)
}

fn fold_range(k: usize, n: usize) -> std::ops::Range<usize> {
    k * n / FOLDS..(k + 1) * n / FOLDS
}

/// The threshold maximizing accuracy of `score > θ ⇔ same` over candidates
/// `−∞`, midpoints of adjacent distinct scores, and `+∞`; ties go to the lowest.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total_same = labels.iter().filter(|&&l| l).count();
    // k = number of pairs predicted "different" (the k lowest scores)
    let (mut best_k, mut best_correct) = (0, total_same);
    let (mut diff_below, mut same_below) = (0usize, 0usize);
    for k in 1..=idx.len() {
        if labels[idx[k - 1]] {
            same_below += 1;
        } else {
            diff_below += 1;
        }
        if k < idx.len() && scores[idx[k - 1]] == scores[idx[k]] {
            continue;
        }
        let correct = diff_below + (total_same - same_below);
        if correct > best_correct {
            best_correct = correct;
            best_k = k;
        }
    }
    if best_k == 0 {
        f64::NEG_INFINITY
    } else if best_k == idx.len() {
        f64::INFINITY
    } else {
        (scores[idx[best_k - 1]] + scores[idx[best_k]]) / 2.0
    }
}

/// Mean held-out accuracy over the ten contiguous folds.
pub fn tenfold_accuracy_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n = scores.len();
    if n != labels.len() {
        return Err(validation("one label per score required"));
    }
    if n < FOLDS {
        return Err(validation(format!("need at least {FOLDS} pairs, got {n}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN similarity score".into()));
    }
    let mut total = 0.0;
    for k in 0..FOLDS {
        let test = fold_range(k, n);
        let (train_s, train_l): (Vec<f64>, Vec<bool>) = (0..n)
            .filter(|i| !test.contains(i))
            .map(|i| (scores[i], labels[i]))
            .unzip();
        let theta = best_threshold(&train_s, &train_l);
        let correct = test.clone().filter(|&i| (scores[i] > theta) == labels[i]).count();
        total += correct as f64 / test.len() as f64;
    }
    Ok(total / FOLDS as f64)
}

/// Embeds every distinct path once.
fn embed_paths(paths: &[&Path], encoder: &EncoderCheckpoint<f32>) -> Result<HashMap<PathBuf, IdentityEmbedding>> {
    let r = encoder.config().resolution;
    let mut unique: Vec<&Path> = paths.to_vec();
    unique.sort();
    unique.dedup();
    let mut out = HashMap::with_capacity(unique.len());
    for chunk in unique.chunks(256) {
        let images = chunk
            .iter()
            .map(|p| Ok(ImageArray::load_png(p)?.resized(r, r)))
            .collect::<Result<Vec<_>>>()?;
        for (p, e) in chunk.iter().zip(encoder.embed_batch(&images)?) {
            out.insert(p.to_path_buf(), e);
        }
    }
    Ok(out)
}

/// Cosine similarity of each pair under `encoder`.
pub fn pair_scores(pairs: &PairList, encoder: &EncoderCheckpoint<f32>) -> Result<Vec<f64>> {
    let paths: Vec<&Path> = pairs.pairs.iter().flat_map(|p| [p.a.as_path(), p.b.as_path()]).collect();
    let emb = embed_paths(&paths, encoder)?;
    pairs
        .pairs
        .iter()
        .map(|p| cosine_similarity(&emb[&p.a], &emb[&p.b]))
        .collect()
}

pub fn tenfold_accuracy(pairs: &PairList, encoder: &EncoderCheckpoint<f32>) -> Result<f64> {
    if pairs.pairs.len() < FOLDS {
        return Err(validation(format!("need at least {FOLDS} pairs, got {}", pairs.pairs.len())));
    }
    tenfold_accuracy_scores(&pair_scores(pairs, encoder)?, &pairs.labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetAccuracy {
    pub name: String,
    /// Percent.
    pub accuracy: f64,
}

/// Accuracies are in percent, like the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sets: Vec<SetAccuracy>,
    pub avg: f64,
    pub baseline_avg: f64,
    pub gap_to_real: f64,
    pub tool_version: String,
    /// Digest of the configuration that produced the evaluated model, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// `baseline_avg − avg`, rounded to 1e-9 so decimal percentages subtract
/// exactly (`94.26 − 92.30` gives `1.96`, not `1.960000000000008`).
pub fn gap_to_real(baseline_avg: f64, avg: f64) -> f64 {
    ((baseline_avg - avg) * 1e9).round() / 1e9
}

impl EvalReport {
    pub fn from_sets(sets: Vec<SetAccuracy>, baseline_avg: f64) -> Result<Self> {
        if sets.is_empty() {
            return Err(validation("at least one test set required"));
        }
        let avg = sets.iter().map(|s| s.accuracy).sum::<f64>() / sets.len() as f64;
        Ok(Self {
            gap_to_real: gap_to_real(baseline_avg, avg),
            sets,
            avg,
            baseline_avg,
            tool_version: TOOL_VERSION.to_string(),
            config_digest: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn evaluate_suite(pair_lists: &[PairList], encoder: &EncoderCheckpoint<f32>, baseline_avg: f64) -> Result<EvalReport> {
    let sets = pair_lists
        .iter()
        .map(|p| {
            Ok(SetAccuracy {
                name: p.name.clone(),
                accuracy: 100.0 * tenfold_accuracy(p, encoder)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_sets(sets, baseline_avg)
}

/// Renders held-out toy identities under `out_dir` and writes a balanced pair
/// list `out_dir/pairs.txt` alternating same and different pairs.
pub fn make_toy_pairs(spec: &ToySpec, num_pairs: usize, seed: u64, out_dir: &Path) -> Result<PairList> {
    if spec.per_identity < 2 {
        return Err(validation("pair generation needs at least 2 images per identity"));
    }
    let corpus = render_toy_corpus(spec)?;
    let per = spec.per_identity;
    let rel = |id: usize, k: usize| format!("{}/img_{k:04}.png", subject_dir(id));
    for (i, img) in corpus.images().iter().enumerate() {
        let path = out_dir.join(rel(i / per, i % per));
        fs::create_dir_all(path.parent().expect("image path has a parent"))?;
        img.save_png(&path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for p in 0..num_pairs {
        let same = p % 2 == 0;
        let a_id = rng.random_range(0..spec.identities);
        let b_id = if same {
            a_id
        } else {
            (a_id + rng.random_range(1..spec.identities)) % spec.identities
        };
        let ka = rng.random_range(0..per);
        let kb = if same { (ka + rng.random_range(1..per)) % per } else { rng.random_range(0..per) };
        text.push_str(&format!("{}\t{}\t{}\n", rel(a_id, ka), rel(b_id, kb), u8::from(same)));
    }
    let path = out_dir.join("pairs.txt");
    fs::write(&path, &text)?;
    PairList::read(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct enumeration of every candidate threshold per fold.
    fn brute_force(scores: &[f64], labels: &[bool]) -> f64 {
        let n = scores.len();
        let mut total = 0.0;
        for k in 0..FOLDS {
            let test: Vec<usize> = (0..n).filter(|&i| fold_of(i, n) == k).collect();
            let train: Vec<usize> = (0..n).filter(|&i| fold_of(i, n) != k).collect();
            let mut vals: Vec<f64> = train.iter().map(|&i| scores[i]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            let mut cands = vec![f64::NEG_INFINITY];
            cands.extend(vals.windows(2).map(|w| (w[0] + w[1]) / 2.0));
            cands.push(f64::INFINITY);
            let acc = |t: f64, set: &[usize]| set.iter().filter(|&&i| (scores[i] > t) == labels[i]).count();
            let mut best = cands[0];
            for &c in &cands {
                if acc(c, &train) > acc(best, &train) {
                    best = c;
                }
            }
            total += acc(best, &test) as f64 / test.len() as f64;
        }
        total / FOLDS as f64
    }

    #[test]
    fn separable_and_degenerate() {
        let labels: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let sep: Vec<f64> = labels.iter().map(|&l| if l { 0.8 } else { 0.1 }).collect();
        assert_eq!(tenfold_accuracy_scores(&sep, &labels).unwrap(), 1.0);
        let flat = vec![0.5; 40];
        assert_eq!(tenfold_accuracy_scores(&flat, &labels).unwrap(), 0.5);
        assert!(tenfold_accuracy_scores(&flat[..9], &labels[..9]).is_err());
    }

    #[test]
    fn folds_are_balanced() {
        for n in [10, 11, 19, 200, 203] {
            let sizes: Vec<usize> = (0..FOLDS).map(|k| (0..n).filter(|&i| fold_of(i, n) == k).count()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.5)).collect();
            let scores: Vec<f64> = labels
                .iter()
                .map(|&l| ((rng.random_range(-1.0..1.0) + if l { 0.5 } else { 0.0 }) * 100.0f64).round() / 100.0)
                .collect();
            assert_eq!(tenfold_accuracy_scores(&scores, &labels).unwrap(), brute_force(&scores, &labels));
        }
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap_to_real(94.26, 92.30), 1.96);
        assert_eq!(gap_to_real(94.26, 90.18), 4.08);
        let r = EvalReport::from_sets(
            vec![SetAccuracy {
                name: "a".into(),
                accuracy: 91.5,
            }],
            94.26,
        )
        .unwrap();
        assert_eq!(r.avg, 91.5);
    }

    #[test]
    fn parse_pairs() {
        let p = PairList::parse("x.png\ty.png\t1\nx.png\tz.png\t0\n", "t", Path::new("/d")).unwrap();
        assert_eq!(p.pairs[0].a, PathBuf::from("/d/x.png"));
        assert_eq!(p.labels(), vec![true, false]);
        assert!(PairList::parse("x\ty\t2\n", "t", Path::new("")).is_err());
        assert!(PairList::parse("x\ty\n", "t", Path::new("")).is_err());
    }
}
