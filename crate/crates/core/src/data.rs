//! Deterministic synthetic task generation.
//!
//! The synthetic world associates every class-budget token with a fixed
//! prototype direction in image space (a pure function of the token id, not
//! of any run seed). Contrastive pretraining aligns text and images through
//! that shared map, which is what makes zero-shot classification on freshly
//! generated tasks possible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{container, Tensor};
use crate::rng::{mix_seed, domain, Rng};

/// Template tokens standing in for "a photo of a".
pub const DEFAULT_TEMPLATE: [usize; 3] = [1, 2, 3];

/// Token layout and image dimensionality shared by pretraining and tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub image_dim: usize,
    /// Token prefix used by the zero-shot classifier.
    pub template: Vec<usize>,
    /// First token id reserved for class names.
    pub class_token_start: usize,
    /// Number of reserved class tokens.
    pub class_token_count: usize,
}

impl WorldConfig {
    pub fn for_vocab(vocab_size: usize, image_dim: usize) -> Self {
        WorldConfig {
            image_dim,
            template: DEFAULT_TEMPLATE.to_vec(),
            class_token_start: 8,
            class_token_count: vocab_size - 8,
        }
    }

    pub fn class_tokens(&self) -> std::ops::Range<usize> {
        self.class_token_start..self.class_token_start + self.class_token_count
    }
}

/// Fixed unit prototype direction for a class token. Pure function of
/// (token, image_dim); every component of the artifact relies on this map
/// being identical everywhere.
pub fn prototype(token: usize, image_dim: usize) -> Tensor {
    let mut rng = Rng::new(mix_seed(&[
        domain("prototype"),
        token as u64,
        image_dim as u64,
    ]));
    let mut v = rng.normals(image_dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Tensor::new(vec![image_dim], v).expect("prototype shape")
}

/// One labelled image-space sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

/// A few-shot classification task over the synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub seed: u64,
    pub image_dim: usize,
    /// One token sequence per class (single token each by default).
    pub class_tokens: Vec<Vec<usize>>,
    /// Exactly `shots` samples per class.
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub shifted_tests: Vec<(String, Vec<Sample>)>,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.class_tokens.len()
    }

    /// Prototype direction of class `i` (from the world map).
    pub fn class_prototype(&self, i: usize) -> Tensor {
        prototype(self.class_tokens[i][0], self.image_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub classes: usize,
    pub shots: usize,
    pub tests_per_class: usize,
    /// Required pairwise separation between class prototypes; the generator
    /// enforces |cos| <= 1 - class_separation over all chosen pairs.
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            seed: 0,
            classes: 8,
            shots: 16,
            tests_per_class: 64,
            class_separation: 0.7,
            noise_sigma: 0.35,
        }
    }
}

/// Generates a task: selects class tokens whose fixed prototypes satisfy the
/// separation bound, then draws train/test samples as prototype + noise.
pub fn generate_task(cfg: &TaskConfig, world: &WorldConfig) -> Result<SyntheticTask> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.shots < 1 || cfg.tests_per_class < 1 {
        return Err(Error::Config("shots and tests_per_class must be >= 1".into()));
    }
    if cfg.classes > world.class_token_count {
        return Err(Error::Config(format!(
            "{} classes exceed the class-token budget {}",
            cfg.classes, world.class_token_count
        )));
    }
    if !(0.0..=1.0).contains(&cfg.class_separation) {
        return Err(Error::Config(format!(
            "class_separation must lie in [0,1], got {}",
            cfg.class_separation
        )));
    }
    let cos_bound = 1.0 - cfg.class_separation;

    let mut rng = Rng::new(mix_seed(&[domain("task"), cfg.seed]));
    let mut candidates: Vec<usize> = world.class_tokens().collect();
    rng.shuffle(&mut candidates);

    // greedy selection under the pairwise-cosine bound
    let dim = world.image_dim;
    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.classes);
    let mut protos: Vec<Tensor> = Vec::with_capacity(cfg.classes);
    for tok in candidates {
        let p = prototype(tok, dim);
        let compatible = protos.iter().all(|q| {
            let dot: f64 = p.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
            dot.abs() <= cos_bound
        });
        if compatible {
            chosen.push(tok);
            protos.push(p);
            if chosen.len() == cfg.classes {
                break;
            }
        }
    }
    if chosen.len() < cfg.classes {
        return Err(Error::Generation(format!(
            "could not select {} prototypes with pairwise |cos| <= {:.3} (got {})",
            cfg.classes,
            cos_bound,
            chosen.len()
        )));
    }

    let draw_split = |per_class: usize, rng: &mut Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(per_class * cfg.classes);
        for (y, proto) in protos.iter().enumerate() {
            for _ in 0..per_class {
                let mut x = proto.data().to_vec();
                for v in &mut x {
                    *v += cfg.noise_sigma * rng.normal();
                }
                out.push(Sample {
                    x: Tensor::new(vec![dim], x).expect("sample shape"),
                    y,
                });
            }
        }
        out
    };
    let train = draw_split(cfg.shots, &mut rng);
    let test = draw_split(cfg.tests_per_class, &mut rng);

    Ok(SyntheticTask {
        seed: cfg.seed,
        image_dim: dim,
        class_tokens: chosen.into_iter().map(|t| vec![t]).collect(),
        train,
        test,
        shifted_tests: Vec::new(),
    })
}

// ── Distribution shifts ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Noise,
    Rotation,
    Scale,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::Noise => "noise",
            ShiftKind::Rotation => "rotation",
            ShiftKind::Scale => "scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    pub seed: u64,
}

/// The shift set used by the OOD analogue: one split per shift kind.
pub fn default_shift_specs() -> Vec<ShiftSpec> {
    vec![
        ShiftSpec {
            kind: ShiftKind::Noise,
            magnitude: 0.5,
            seed: 70,
        },
        ShiftSpec {
            kind: ShiftKind::Rotation,
            magnitude: 0.3,
            seed: 71,
        },
        ShiftSpec {
            kind: ShiftKind::Scale,
            magnitude: 0.5,
            seed: 72,
        },
    ]
}

/// Composes `dim` seeded Givens rotations with angles scaled by `magnitude`.
/// The result is orthogonal with determinant +1; magnitude 0 yields the
/// identity exactly.
pub fn rotation_matrix(dim: usize, magnitude: f64, seed: u64) -> Tensor {
    let mut q = Tensor::zeros(vec![dim, dim]);
    for i in 0..dim {
        q.data_mut()[i * dim + i] = 1.0;
    }
    let mut rng = Rng::new(mix_seed(&[domain("rotation"), seed]));
    for _ in 0..dim {
        let a = rng.below(dim);
        let mut b = rng.below(dim - 1);
        if b >= a {
            b += 1;
        }
        let angle = magnitude * (rng.uniform() * 2.0 - 1.0) * std::f64::consts::FRAC_PI_2;
        let (s, c) = angle.sin_cos();
        // right-multiply q by the Givens rotation in the (a, b) plane
        for r in 0..dim {
            let xa = q.data()[r * dim + a];
            let xb = q.data()[r * dim + b];
            q.data_mut()[r * dim + a] = c * xa - s * xb;
            q.data_mut()[r * dim + b] = s * xa + c * xb;
        }
    }
    q
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(m: &Tensor) -> f64 {
    let n = m.rows();
    assert_eq!(n, m.cols(), "determinant needs a square matrix");
    let mut a = m.data().to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[piv * n + col].abs() {
                piv = r;
            }
        }
        if a[piv * n + col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            det = -det;
        }
        det *= a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / a[col * n + col];
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
        }
    }
    det
}

/// Applies a shift to every test sample; labels unchanged, source split
/// untouched.
pub fn make_shifted_testset(task: &SyntheticTask, spec: &ShiftSpec) -> Result<Vec<Sample>> {
    if spec.magnitude < 0.0 {
        return Err(Error::Config(format!(
            "shift magnitude must be >= 0, got {}",
            spec.magnitude
        )));
    }
    if spec.magnitude == 0.0 {
        return Ok(task.test.clone());
    }
    let dim = task.image_dim;
    match spec.kind {
        ShiftKind::Noise => {
            let mut rng = Rng::new(mix_seed(&[domain("shift-noise"), spec.seed]));
            Ok(task
                .test
                .iter()
                .map(|s| {
                    let mut x = s.x.data().to_vec();
                    for v in &mut x {
                        *v += spec.magnitude * rng.normal();
                    }
                    Sample {
                        x: Tensor::new(vec![dim], x).expect("shape"),
                        y: s.y,
                    }
                })
                .collect())
        }
        ShiftKind::Rotation => {
            let q = rotation_matrix(dim, spec.magnitude, spec.seed);
            debug_assert!((determinant(&q) - 1.0).abs() < 1e-9);
            Ok(task
                .test
                .iter()
                .map(|s| {
                    let mut x = vec![0.0; dim];
                    for (r, xo) in x.iter_mut().enumerate() {
                        *xo = q
                            .row(r)
                            .iter()
                            .zip(s.x.data())
                            .map(|(&a, &b)| a * b)
                            .sum();
                    }
                    Sample {
                        x: Tensor::new(vec![dim], x).expect("shape"),
                        y: s.y,
                    }
                })
                .collect())
        }
        ShiftKind::Scale => Ok(task
            .test
            .iter()
            .map(|s| {
                let x: Vec<f64> = s.x.data().iter().map(|v| v * (1.0 + spec.magnitude)).collect();
                Sample {
                    x: Tensor::new(vec![dim], x).expect("shape"),
                    y: s.y,
                }
            })
            .collect()),
    }
}

/// Attaches a named shifted split to the task.
pub fn attach_shift(task: &mut SyntheticTask, spec: &ShiftSpec) -> Result<()> {
    let split = make_shifted_testset(task, spec)?;
    let name = format!("{}_{:.2}", spec.kind.name(), spec.magnitude);
    task.shifted_tests.push((name, split));
    Ok(())
}

// ── Pretraining pair stream ─────────────────────────────────────────────

/// Deterministic stream of (token sequence, image) pairs for contrastive
/// training. Samples a class token, renders its text (with or without the
/// template prefix) and draws the image near the token's prototype.
#[derive(Debug, Clone)]
pub struct PairStream {
    pub world: WorldConfig,
    pub noise_sigma: f64,
    pub pairs_per_epoch: usize,
    /// Probability of rendering the bare class token without the template.
    pub bare_class_prob: f64,
    /// Optional orthogonal map applied to prototypes (used by upgrades).
    pub rotation: Option<Tensor>,
}

impl PairStream {
    pub fn new(world: WorldConfig, noise_sigma: f64, pairs_per_epoch: usize) -> Self {
        PairStream {
            world,
            noise_sigma,
            pairs_per_epoch,
            bare_class_prob: 0.5,
            rotation: None,
        }
    }

    pub fn epoch(&self, rng: &mut Rng) -> Vec<(Vec<usize>, Tensor)> {
        let dim = self.world.image_dim;
        let mut out = Vec::with_capacity(self.pairs_per_epoch);
        for _ in 0..self.pairs_per_epoch {
            let tok = self.world.class_token_start + rng.below(self.world.class_token_count);
            let text = if rng.uniform() < self.bare_class_prob {
                vec![tok]
            } else {
                let mut t = self.world.template.clone();
                t.push(tok);
                t
            };
            let mut proto = prototype(tok, dim).data().to_vec();
            if let Some(q) = &self.rotation {
                let mut rotated = vec![0.0; dim];
                for (r, ro) in rotated.iter_mut().enumerate() {
                    *ro = q.row(r).iter().zip(&proto).map(|(&a, &b)| a * b).sum();
                }
                proto = rotated;
            }
            for v in &mut proto {
                *v += self.noise_sigma * rng.normal();
            }
            out.push((text, Tensor::new(vec![dim], proto).expect("shape")));
        }
        out
    }
}

// ── Serialization ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub image_dim: usize,
    pub class_tokens: Vec<Vec<usize>>,
    pub shifts: Vec<(String, ShiftSpec)>,
}

fn samples_to_tensors(samples: &[Sample], dim: usize) -> (Tensor, Tensor) {
    let n = samples.len();
    let mut xs = Tensor::zeros(vec![n, dim]);
    let mut ys = Tensor::zeros(vec![n]);
    for (i, s) in samples.iter().enumerate() {
        xs.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(s.x.data());
        ys.data_mut()[i] = s.y as f64;
    }
    (xs, ys)
}

fn samples_from_tensors(xs: &Tensor, ys: &Tensor) -> Result<Vec<Sample>> {
    let dim = xs.cols();
    let n = xs.rows();
    if ys.numel() != n {
        return Err(Error::Format("sample label count mismatch".into()));
    }
    Ok((0..n)
        .map(|i| Sample {
            x: Tensor::new(vec![dim], xs.row(i).to_vec()).expect("shape"),
            y: ys.data()[i] as usize,
        })
        .collect())
}

impl SyntheticTask {
    /// Writes `<stem>.pcmp` (tensors) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path, shift_specs: &[(String, ShiftSpec)]) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let (tx, ty) = samples_to_tensors(&self.train, self.image_dim);
        tensors.insert("train.x".to_string(), tx);
        tensors.insert("train.y".to_string(), ty);
        let (ex, ey) = samples_to_tensors(&self.test, self.image_dim);
        tensors.insert("test.x".to_string(), ex);
        tensors.insert("test.y".to_string(), ey);
        for (name, split) in &self.shifted_tests {
            let (sx, sy) = samples_to_tensors(split, self.image_dim);
            tensors.insert(format!("shift.{name}.x"), sx);
            tensors.insert(format!("shift.{name}.y"), sy);
        }
        container::save_to_file(&stem.with_extension("pcmp"), &tensors)?;
        let manifest = TaskManifest {
            format: "pcmp-task".into(),
            version: 1,
            seed: self.seed,
            image_dim: self.image_dim,
            class_tokens: self.class_tokens.clone(),
            shifts: shift_specs.to_vec(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<SyntheticTask> {
        let tensors = container::load_from_file(&stem.with_extension("pcmp"))?;
        let manifest: TaskManifest = serde_json::from_str(
            &std::fs::read_to_string(stem.with_extension("json"))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        let get = |name: &str| -> Result<&Tensor> {
            tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let train = samples_from_tensors(get("train.x")?, get("train.y")?)?;
        let test = samples_from_tensors(get("test.x")?, get("test.y")?)?;
        let mut shifted = Vec::new();
        for (name, _) in &manifest.shifts {
            let sx = get(&format!("shift.{name}.x"))?;
            let sy = get(&format!("shift.{name}.y"))?;
            shifted.push((name.clone(), samples_from_tensors(sx, sy)?));
        }
        Ok(SyntheticTask {
            seed: manifest.seed,
            image_dim: manifest.image_dim,
            class_tokens: manifest.class_tokens,
            train,
            test,
            shifted_tests: shifted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldConfig {
        WorldConfig::for_vocab(64, 16)
    }

    #[test]
    fn same_seed_identical_task() {
        let cfg = TaskConfig::default();
        let a = generate_task(&cfg, &world()).unwrap();
        let b = generate_task(&cfg, &world()).unwrap();
        assert_eq!(a.class_tokens, b.class_tokens);
        assert_eq!(a.train.len(), b.train.len());
        for (s, t) in a.train.iter().zip(&b.train) {
            assert_eq!(s.y, t.y);
            for (x, y) in s.x.data().iter().zip(t.x.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn shot_counts_exact_and_labels_in_range() {
        let cfg = TaskConfig {
            seed: 3,
            ..TaskConfig::default()
        };
        let t = generate_task(&cfg, &world()).unwrap();
        let mut counts = vec![0usize; cfg.classes];
        for s in &t.train {
            assert!(s.y < cfg.classes);
            counts[s.y] += 1;
        }
        assert!(counts.iter().all(|&c| c == cfg.shots));
        assert_eq!(t.test.len(), cfg.classes * cfg.tests_per_class);
    }

    #[test]
    fn prototypes_respect_separation_bound() {
        for seed in 0..5 {
            let cfg = TaskConfig {
                seed,
                ..TaskConfig::default()
            };
            let t = generate_task(&cfg, &world()).unwrap();
            let protos: Vec<Tensor> = (0..t.classes()).map(|i| t.class_prototype(i)).collect();
            let mut max_cos: f64 = 0.0;
            for i in 0..protos.len() {
                for j in i + 1..protos.len() {
                    let dot: f64 = protos[i]
                        .data()
                        .iter()
                        .zip(protos[j].data())
                        .map(|(a, b)| a * b)
                        .sum();
                    max_cos = max_cos.max(dot.abs());
                }
            }
            assert!(max_cos < 0.3, "seed {seed}: max |cos| = {max_cos}");
        }
    }

    #[test]
    fn infeasible_separation_errors() {
        let cfg = TaskConfig {
            classes: 8,
            class_separation: 0.999,
            ..TaskConfig::default()
        };
        assert!(matches!(
            generate_task(&cfg, &world()),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn zero_noise_two_classes_nearest_prototype_is_perfect() {
        let cfg = TaskConfig {
            seed: 1,
            classes: 2,
            noise_sigma: 0.0,
            ..TaskConfig::default()
        };
        let t = generate_task(&cfg, &world()).unwrap();
        let protos: Vec<Tensor> = (0..2).map(|i| t.class_prototype(i)).collect();
        let correct = t
            .test
            .iter()
            .filter(|s| {
                let d0: f64 = s
                    .x
                    .data()
                    .iter()
                    .zip(protos[0].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let d1: f64 = s
                    .x
                    .data()
                    .iter()
                    .zip(protos[1].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (if d0 <= d1 { 0 } else { 1 }) == s.y
            })
            .count();
        assert_eq!(correct, t.test.len());
    }

    #[test]
    fn train_test_disjoint() {
        let t = generate_task(&TaskConfig::default(), &world()).unwrap();
        let key = |s: &Sample| -> Vec<u64> { s.x.data().iter().map(|v| v.to_bits()).collect() };
        let train_keys: std::collections::HashSet<Vec<u64>> = t.train.iter().map(key).collect();
        assert!(t.test.iter().all(|s| !train_keys.contains(&key(s))));
    }

    #[test]
    fn zero_magnitude_shift_is_identity() {
        let t = generate_task(&TaskConfig::default(), &world()).unwrap();
        for kind in [ShiftKind::Noise, ShiftKind::Rotation, ShiftKind::Scale] {
            let split = make_shifted_testset(
                &t,
                &ShiftSpec {
                    kind,
                    magnitude: 0.0,
                    seed: 5,
                },
            )
            .unwrap();
            for (a, b) in split.iter().zip(&t.test) {
                assert_eq!(a.y, b.y);
                for (x, y) in a.x.data().iter().zip(b.x.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rotation_is_isometric_with_unit_determinant() {
        let t = generate_task(&TaskConfig::default(), &world()).unwrap();
        let spec = ShiftSpec {
            kind: ShiftKind::Rotation,
            magnitude: 0.7,
            seed: 9,
        };
        let split = make_shifted_testset(&t, &spec).unwrap();
        let q = rotation_matrix(t.image_dim, spec.magnitude, spec.seed);
        assert!((determinant(&q) - 1.0).abs() < 1e-9);
        // pairwise distances preserved
        for i in (0..t.test.len()).step_by(97) {
            for j in (i + 1..t.test.len()).step_by(131) {
                let d_orig: f64 = t.test[i]
                    .x
                    .data()
                    .iter()
                    .zip(t.test[j].x.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let d_rot: f64 = split[i]
                    .x
                    .data()
                    .iter()
                    .zip(split[j].x.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d_orig - d_rot).abs() < 1e-9);
            }
        }
        // source split untouched
        let t2 = generate_task(&TaskConfig::default(), &world()).unwrap();
        assert_eq!(t.test, t2.test);
    }

    #[test]
    fn task_roundtrip() {
        let mut t = generate_task(&TaskConfig::default(), &world()).unwrap();
        let specs = default_shift_specs();
        let mut named = Vec::new();
        for spec in &specs {
            attach_shift(&mut t, spec).unwrap();
            named.push((t.shifted_tests.last().unwrap().0.clone(), *spec));
        }
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("task");
        t.save(&stem, &named).unwrap();
        let back = SyntheticTask::load(&stem).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn pair_stream_deterministic() {
        let stream = PairStream::new(world(), 0.25, 32);
        let mut r1 = Rng::new(4);
        let mut r2 = Rng::new(4);
        let a = stream.epoch(&mut r1);
        let b = stream.epoch(&mut r2);
        assert_eq!(a.len(), 32);
        for ((ta, xa), (tb, xb)) in a.iter().zip(&b) {
            assert_eq!(ta, tb);
            for (u, v) in xa.data().iter().zip(xb.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }
}
