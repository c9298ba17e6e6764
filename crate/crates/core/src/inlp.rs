//! Iterative nullspace projection: train a linear attribute classifier,
//! project the data onto the orthogonal complement of its weight vector,
//! and repeat until the classifier is no better than chance.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicon;
use crate::lm::{LanguageModel, TokenId, Vocab};

#[derive(Debug, Error)]
pub enum InlpError {
    #[error("no embeddings given")]
    Empty,
    #[error("classifier needs both labels, found only label {0}")]
    SingleClass(u8),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
    #[error("projection direction is the zero vector")]
    ZeroDirection,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported projection format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convergence tolerance for classifier training (gradient norm).
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Default inverse regularization strength.
pub const DEFAULT_L2_C: f64 = 0.01;
/// Stop once accuracy is within this margin of the majority rate.
pub const CHANCE_MARGIN: f64 = 0.05;
/// Directions shorter than this end the iteration.
pub const MIN_WEIGHT_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub vector: Vec<f64>,
    /// 0 or 1.
    pub label: u8,
}

fn check_data(data: &[LabeledEmbedding]) -> Result<usize, InlpError> {
    let first = data.first().ok_or(InlpError::Empty)?;
    let d = first.vector.len();
    for e in data {
        if e.vector.len() != d {
            return Err(InlpError::DimensionMismatch {
                expected: d,
                got: e.vector.len(),
            });
        }
        if e.label > 1 {
            return Err(InlpError::BadLabel(e.label));
        }
    }
    if data.iter().all(|e| e.label == first.label) {
        return Err(InlpError::SingleClass(first.label));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_c: f64,
}

impl LinearClassifier {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.decision(x) > 0.0)
    }

    pub fn accuracy(&self, data: &[LabeledEmbedding]) -> f64 {
        let hits = data
            .iter()
            .filter(|e| self.predict(&e.vector) == e.label)
            .count();
        hits as f64 / data.len() as f64
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Logistic<'a> {
    x: &'a [LabeledEmbedding],
    c: f64,
    d: usize,
}

impl Logistic<'_> {
    /// `C * sum(log-loss) + |w|^2 / 2`; the bias is not penalized.
    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let w = theta.rows(0, self.d);
        let b = theta[self.d];
        let loss: f64 = self
            .x
            .iter()
            .map(|e| {
                let z = w.iter().zip(&e.vector).map(|(a, v)| a * v).sum::<f64>() + b;
                // -[y log s(z) + (1 - y) log(1 - s(z))]
                if e.label == 1 {
                    softplus(-z)
                } else {
                    softplus(z)
                }
            })
            .sum();
        self.c * loss + 0.5 * w.norm_squared()
    }

    fn gradient_and_hessian(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.d;
        let mut g = DVector::zeros(d + 1);
        let mut h = DMatrix::zeros(d + 1, d + 1);
        let mut xa = DVector::zeros(d + 1);
        xa[d] = 1.0;
        for e in self.x {
            for (i, v) in e.vector.iter().enumerate() {
                xa[i] = *v;
            }
            let p = sigmoid(theta.dot(&xa));
            g.axpy(self.c * (p - f64::from(e.label)), &xa, 1.0);
            h.ger(self.c * p * (1.0 - p), &xa, &xa, 1.0);
        }
        for i in 0..d {
            g[i] += theta[i];
            h[(i, i)] += 1.0;
        }
        (g, h)
    }
}

/// L2-regularized logistic regression by damped Newton iterations from zero.
pub fn train_classifier(data: &[LabeledEmbedding], l2_c: f64) -> Result<LinearClassifier, InlpError> {
    let d = check_data(data)?;
    let problem = Logistic { x: data, c: l2_c, d };
    let mut theta = DVector::zeros(d + 1);
    let mut f = problem.objective(&theta);
    for _ in 0..200 {
        let (g, h) = problem.gradient_and_hessian(&theta);
        if g.norm() < GRADIENT_TOLERANCE {
            break;
        }
        let step = match h.clone().cholesky() {
            Some(chol) => chol.solve(&g),
            None => g.clone(),
        };
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let next = &theta - t * &step;
            let f_next = problem.objective(&next);
            if f_next <= f - 1e-4 * t * slope || t < 1e-12 {
                theta = next;
                f = f_next;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(LinearClassifier {
        weights: theta.rows(0, d).iter().copied().collect(),
        bias: theta[d],
        l2_c,
    })
}

/// `I - w w^T / (w^T w)`.
pub fn nullspace_projection(direction: &[f64]) -> Result<DMatrix<f64>, InlpError> {
    let w = DVector::from_column_slice(direction);
    let norm2 = w.norm_squared();
    if norm2 == 0.0 {
        return Err(InlpError::ZeroDirection);
    }
    let n = w.len();
    Ok(DMatrix::identity(n, n) - (&w * w.transpose()) / norm2)
}

/// Number of singular values above `tol`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    m.clone()
        .singular_values()
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionState {
    pub projection: DMatrix<f64>,
    /// Directions removed, equal to the rank drop of `projection`.
    pub iterations: usize,
    /// Training accuracy of every classifier fitted, in order. The last
    /// entry is the accuracy at which the procedure stopped.
    pub accuracy_history: Vec<f64>,
    /// Orthonormal removed directions.
    pub removed_directions: Vec<Vec<f64>>,
}

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ProjectionFile {
    version: u32,
    dim: usize,
    /// Row-major.
    projection: Vec<f64>,
    iterations: usize,
    accuracy_history: Vec<f64>,
    removed_directions: Vec<Vec<f64>>,
}

impl ProjectionState {
    pub fn identity(dim: usize) -> Self {
        Self {
            projection: DMatrix::identity(dim, dim),
            iterations: 0,
            accuracy_history: Vec::new(),
            removed_directions: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn to_json(&self) -> String {
        let d = self.dim();
        let file = ProjectionFile {
            version: FORMAT_VERSION,
            dim: d,
            projection: (0..d)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| self.projection[(i, j)])
                .collect(),
            iterations: self.iterations,
            accuracy_history: self.accuracy_history.clone(),
            removed_directions: self.removed_directions.clone(),
        };
        serde_json::to_string_pretty(&file).expect("projection serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, InlpError> {
        let f: ProjectionFile = serde_json::from_str(text)?;
        if f.version != FORMAT_VERSION {
            return Err(InlpError::UnsupportedVersion(f.version));
        }
        if f.projection.len() != f.dim * f.dim {
            return Err(InlpError::DimensionMismatch {
                expected: f.dim * f.dim,
                got: f.projection.len(),
            });
        }
        Ok(Self {
            projection: DMatrix::from_row_slice(f.dim, f.dim, &f.projection),
            iterations: f.iterations,
            accuracy_history: f.accuracy_history,
            removed_directions: f.removed_directions,
        })
    }
}

fn majority_rate(data: &[LabeledEmbedding]) -> f64 {
    let ones = data.iter().filter(|e| e.label == 1).count();
    ones.max(data.len() - ones) as f64 / data.len() as f64
}

/// Runs the train-project loop.
///
/// Each round retrains from scratch on the currently projected data. The
/// loop stops when accuracy is at most the majority rate plus
/// [`CHANCE_MARGIN`], when the weight norm falls below [`MIN_WEIGHT_NORM`],
/// or after `max_iters` directions have been removed.
pub fn run_inlp(
    data: &[LabeledEmbedding],
    l2_c: f64,
    max_iters: usize,
) -> Result<ProjectionState, InlpError> {
    let d = check_data(data)?;
    let threshold = majority_rate(data) + CHANCE_MARGIN;
    let mut state = ProjectionState::identity(d);
    let mut current = data.to_vec();
    loop {
        let clf = train_classifier(&current, l2_c)?;
        let acc = clf.accuracy(&current);
        state.accuracy_history.push(acc);
        if acc <= threshold || clf.weight_norm() < MIN_WEIGHT_NORM || state.iterations >= max_iters {
            break;
        }
        // Re-orthonormalize against earlier directions to stop drift.
        let mut u = DVector::from_vec(clf.weights);
        for prev in &state.removed_directions {
            let p = DVector::from_column_slice(prev);
            let c = u.dot(&p);
            u.axpy(-c, &p, 1.0);
        }
        let norm = u.norm();
        if norm < MIN_WEIGHT_NORM {
            break;
        }
        u /= norm;
        let step = nullspace_projection(u.as_slice())?;
        state.projection = &step * &state.projection;
        state.removed_directions.push(u.iter().copied().collect());
        state.iterations += 1;
        for (e, orig) in current.iter_mut().zip(data) {
            let v = &state.projection * DVector::from_column_slice(&orig.vector);
            e.vector = v.iter().copied().collect();
        }
    }
    Ok(state)
}

/// `P v` for every vector.
pub fn apply_projection(
    state: &ProjectionState,
    vectors: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, InlpError> {
    let d = state.dim();
    vectors
        .iter()
        .map(|v| {
            if v.len() != d {
                return Err(InlpError::DimensionMismatch {
                    expected: d,
                    got: v.len(),
                });
            }
            let out = &state.projection * DVector::from_column_slice(v);
            Ok(out.iter().copied().collect())
        })
        .collect()
}

/// Gaussian data with the label encoded along one random unit direction:
/// `x = z + (2y - 1) * signal * u`, `z ~ N(0, I)`. Labels alternate, so the
/// set is balanced. Returns the data and `u`.
pub fn planted_direction_data(
    n: usize,
    d: usize,
    signal: f64,
    seed: u64,
) -> (Vec<LabeledEmbedding>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut u: Vec<f64> = (0..d).map(|_| normal()).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    let data = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let vector = u.iter().map(|&ui| normal() + sign * signal * ui).collect();
            LabeledEmbedding { vector, label }
        })
        .collect();
    (data, u)
}

/// Reads `{"vector": [...], "label": 0|1}` lines. Blank lines are skipped.
pub fn read_embeddings(path: &Path) -> Result<Vec<LabeledEmbedding>, InlpError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out: Vec<LabeledEmbedding> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| InlpError::Parse {
            line: i + 1,
            message,
        };
        let e: LabeledEmbedding =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if e.label > 1 {
            return Err(parse_err(format!("label must be 0 or 1, got {}", e.label)));
        }
        if let Some(first) = out.first() {
            if first.vector.len() != e.vector.len() {
                return Err(parse_err(format!(
                    "vector has dimension {}, expected {}",
                    e.vector.len(),
                    first.vector.len()
                )));
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// A log-bilinear factorization of a model conditioned on its last token:
/// `logit(v | c) = b_v + <h_c, o_v>`, from an SVD of the column-centered
/// log-probability table. At full rank it reproduces the source model.
/// A projection applied to the hidden states `h_c` plays the role of a
/// projection on final hidden states before the output layer.
#[derive(Debug, Clone)]
pub struct LowRankHead {
    vocab: Vocab,
    bias: DVector<f64>,
    /// One row per context: BOS first, then every token id.
    hidden: DMatrix<f64>,
    /// One row per output token.
    output: DMatrix<f64>,
    projection: Option<DMatrix<f64>>,
}

impl LowRankHead {
    pub fn fit<M: LanguageModel + ?Sized>(model: &M, rank: Option<usize>) -> Self {
        let v = model.vocab().len();
        let mut table = DMatrix::zeros(v + 1, v);
        for c in 0..=v {
            let ctx: Vec<TokenId> = if c == 0 { vec![] } else { vec![(c - 1) as TokenId] };
            let lp = model.next_log_probs(&ctx);
            for (j, x) in lp.iter().enumerate() {
                table[(c, j)] = *x;
            }
        }
        let bias = table.row_mean().transpose();
        for mut col in table.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        let svd = table.svd(true, true);
        let u = svd.u.expect("left vectors requested");
        let vt = svd.v_t.expect("right vectors requested");
        let k = rank.unwrap_or(svd.singular_values.len()).min(svd.singular_values.len());
        let mut hidden = u.columns(0, k).into_owned();
        for j in 0..k {
            hidden.column_mut(j).scale_mut(svd.singular_values[j]);
        }
        let output = vt.rows(0, k).transpose();
        Self {
            vocab: model.vocab().clone(),
            bias,
            hidden,
            output,
            projection: None,
        }
    }

    pub fn rank(&self) -> usize {
        self.hidden.ncols()
    }

    /// Output embeddings of the lexicon terms present in the vocabulary,
    /// agentic labeled 0 and communal labeled 1.
    pub fn term_embeddings(&self, lexicon: &Lexicon) -> Vec<LabeledEmbedding> {
        let mut out = Vec::new();
        for (label, terms) in [(0u8, lexicon.agentic()), (1u8, lexicon.communal())] {
            for t in terms {
                if let Some(id) = self.vocab.id(t) {
                    out.push(LabeledEmbedding {
                        vector: self.output.row(id as usize).iter().copied().collect(),
                        label,
                    });
                }
            }
        }
        out
    }

    pub fn with_projection(&self, state: &ProjectionState) -> Result<Self, InlpError> {
        if state.dim() != self.rank() {
            return Err(InlpError::DimensionMismatch {
                expected: self.rank(),
                got: state.dim(),
            });
        }
        Ok(Self {
            projection: Some(state.projection.clone()),
            ..self.clone()
        })
    }
}

impl LanguageModel for LowRankHead {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let row = prefix.last().map_or(0, |&t| t as usize + 1);
        let mut h = self.hidden.row(row).transpose();
        if let Some(p) = &self.projection {
            h = p * h;
        }
        let logits = &self.output * h + &self.bias;
        let max = logits.max();
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - lse).collect()
    }
}
