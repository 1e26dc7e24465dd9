//! Region projection and the recurrent sentence encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScanError};
use crate::linalg::{dot, Matrix};

/// Raw region features for one image, one row per region.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    f: Matrix,
}

impl ImageFeatures {
    pub fn new(f: Matrix) -> Result<Self> {
        if f.rows() == 0 {
            return Err(ScanError::Domain("an image needs at least one region".into()));
        }
        if !f.is_finite() {
            return Err(ScanError::Numeric("non-finite region feature".into()));
        }
        Ok(ImageFeatures { f })
    }

    pub fn raw(&self) -> &Matrix {
        &self.f
    }

    pub fn region_count(&self) -> usize {
        self.f.rows()
    }
}

/// Vocabulary indices of one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordSequence {
    tokens: Vec<usize>,
}

impl WordSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(ScanError::Domain("a sentence needs at least one word".into()));
        }
        Ok(WordSequence { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reversed(&self) -> WordSequence {
        WordSequence {
            tokens: self.tokens.iter().rev().copied().collect(),
        }
    }
}

/// Weights of one GRU direction. Input maps are `hidden × embed`,
/// recurrent maps `hidden × hidden`, biases `1 × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Matrix,
    pub b_r: Matrix,
    pub b_h: Matrix,
}

impl GruParams {
    pub fn zeros(embed: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Matrix::zeros(hidden, embed),
            w_r: Matrix::zeros(hidden, embed),
            w_h: Matrix::zeros(hidden, embed),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_z: Matrix::zeros(1, hidden),
            b_r: Matrix::zeros(1, hidden),
            b_h: Matrix::zeros(1, hidden),
        }
    }

    fn init<R: Rng>(embed: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            w_z: glorot(hidden, embed, rng),
            w_r: glorot(hidden, embed, rng),
            w_h: glorot(hidden, embed, rng),
            u_z: glorot(hidden, hidden, rng),
            u_r: glorot(hidden, hidden, rng),
            u_h: glorot(hidden, hidden, rng),
            b_z: Matrix::zeros(1, hidden),
            b_r: Matrix::zeros(1, hidden),
            b_h: Matrix::zeros(1, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn embed(&self) -> usize {
        self.w_z.cols()
    }

    fn tensors(&self) -> [&Matrix; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

/// Layer sizes of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub raw_dim: usize,
    pub embed_dim: usize,
    /// Joint embedding width, also the GRU hidden size.
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.raw_dim == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return Err(ScanError::Config(format!("all model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// The complete trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `hidden × raw`.
    pub w_v: Matrix,
    /// `1 × hidden`.
    pub b_v: Matrix,
    /// `vocab × embed`.
    pub w_e: Matrix,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            w_v: Matrix::zeros(dims.hidden_dim, dims.raw_dim),
            b_v: Matrix::zeros(1, dims.hidden_dim),
            w_e: Matrix::zeros(dims.vocab_size, dims.embed_dim),
            gru_fwd: GruParams::zeros(dims.embed_dim, dims.hidden_dim),
            gru_bwd: GruParams::zeros(dims.embed_dim, dims.hidden_dim),
        }
    }

    /// Uniform Glorot weights, zero biases, embeddings in ±0.1.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let w_v = glorot(dims.hidden_dim, dims.raw_dim, rng);
        let w_e = Matrix::from_vec(
            dims.vocab_size,
            dims.embed_dim,
            (0..dims.vocab_size * dims.embed_dim)
                .map(|_| rng.random_range(-0.1..0.1))
                .collect(),
        )?;
        let gru_fwd = GruParams::init(dims.embed_dim, dims.hidden_dim, rng);
        let gru_bwd = GruParams::init(dims.embed_dim, dims.hidden_dim, rng);
        Ok(ModelParams {
            w_v,
            b_v: Matrix::zeros(1, dims.hidden_dim),
            w_e,
            gru_fwd,
            gru_bwd,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            raw_dim: self.w_v.cols(),
            embed_dim: self.w_e.cols(),
            hidden_dim: self.w_v.rows(),
            vocab_size: self.w_e.rows(),
        }
    }

    /// Parameter names in their canonical order.
    pub fn names() -> Vec<String> {
        let mut names = vec!["w_v".to_string(), "b_v".to_string(), "w_e".to_string()];
        for dir in ["gru_fwd", "gru_bwd"] {
            names.extend(GRU_NAMES.iter().map(|n| format!("{dir}.{n}")));
        }
        names
    }

    /// All tensors in canonical order (see [`ModelParams::names`]).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.w_v, &self.b_v, &self.w_e];
        out.extend(self.gru_fwd.tensors());
        out.extend(self.gru_bwd.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.w_v, &mut self.b_v, &mut self.w_e];
        out.extend(self.gru_fwd.tensors_mut());
        out.extend(self.gru_bwd.tensors_mut());
        out
    }

    /// Rebuilds parameters from tensors in canonical order, checking
    /// that the shapes are mutually consistent.
    pub fn from_tensors(mut tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != 21 {
            return Err(ScanError::Config(format!(
                "expected 21 parameter tensors, got {}",
                tensors.len()
            )));
        }
        let w_v = tensors[0].clone();
        let dims = ModelDims {
            raw_dim: w_v.cols(),
            hidden_dim: w_v.rows(),
            embed_dim: tensors[2].cols(),
            vocab_size: tensors[2].rows(),
        };
        let mut params = ModelParams::zeros(dims);
        for (slot, t) in params.tensors_mut().into_iter().zip(tensors.drain(..)) {
            if slot.shape() != t.shape() {
                return Err(ScanError::Config(format!(
                    "parameter shape {:?} inconsistent with dims {dims:?} (expected {:?})",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn total_len(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }
}

/// `v_i = W_v f_i + b_v` for every region.
pub fn project_regions(feat: &ImageFeatures, params: &ModelParams) -> Result<Matrix> {
    if feat.raw().cols() != params.w_v.cols() {
        return Err(ScanError::dim(format!(
            "region features have width {} but the projection expects {}",
            feat.raw().cols(),
            params.w_v.cols()
        )));
    }
    feat.raw().matmul_bt(&params.w_v)?.add_row(&params.b_v)
}

/// Row `i` is row `tokens[i]` of the embedding table.
pub fn embed_words(seq: &WordSequence, params: &ModelParams) -> Result<Matrix> {
    let vocab = params.w_e.rows();
    if let Some(&bad) = seq.tokens().iter().find(|&&t| t >= vocab) {
        return Err(ScanError::Vocabulary {
            index: bad,
            size: vocab,
        });
    }
    Ok(params.w_e.select_rows(seq.tokens()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine(w: &Matrix, x: &[f64], u: &Matrix, h: &[f64], b: &Matrix) -> Vec<f64> {
    (0..w.rows())
        .map(|r| dot(w.row(r), x) + dot(u.row(r), h) + b.data()[r])
        .collect()
}

/// One GRU update:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_step(x: &[f64], h_prev: &[f64], gates: &GruParams) -> Result<Vec<f64>> {
    if x.len() != gates.embed() || h_prev.len() != gates.hidden() {
        return Err(ScanError::dim(format!(
            "gru_step input {} / state {} vs cell {}x{}",
            x.len(),
            h_prev.len(),
            gates.embed(),
            gates.hidden()
        )));
    }
    let z: Vec<f64> = affine(&gates.w_z, x, &gates.u_z, h_prev, &gates.b_z)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = affine(&gates.w_r, x, &gates.u_r, h_prev, &gates.b_r)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let cand = affine(&gates.w_h, x, &gates.u_h, &rh, &gates.b_h);
    Ok(cand
        .into_iter()
        .zip(z)
        .zip(h_prev)
        .map(|((c, z), &h)| (1.0 - z) * h + z * c.tanh())
        .collect())
}

fn scan(x: &Matrix, gates: &GruParams, reverse: bool) -> Result<Matrix> {
    let n = x.rows();
    let mut out = Matrix::zeros(n, gates.hidden());
    let mut h = vec![0.0; gates.hidden()];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        h = gru_step(x.row(t), &h, gates)?;
        out.row_mut(t).copy_from_slice(&h);
    }
    Ok(out)
}

/// Context word features: the mean of the forward and backward GRU
/// states at each position.
pub fn encode_sentence(seq: &WordSequence, params: &ModelParams) -> Result<Matrix> {
    let x = embed_words(seq, params)?;
    let fwd = scan(&x, &params.gru_fwd, false)?;
    let bwd = scan(&x, &params.gru_bwd, true)?;
    Ok(fwd.add(&bwd)?.scale(0.5))
}

/// Forward states only.
pub fn encode_sentence_unidirectional(seq: &WordSequence, params: &ModelParams) -> Result<Matrix> {
    let x = embed_words(seq, params)?;
    scan(&x, &params.gru_fwd, false)
}

/// Which sentence encoder a model uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceEncoder {
    #[default]
    Bidirectional,
    Forward,
}

impl std::str::FromStr for SentenceEncoder {
    type Err = ScanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bidirectional" | "bi" | "bigru" => Ok(SentenceEncoder::Bidirectional),
            "forward" | "uni" | "unidirectional" => Ok(SentenceEncoder::Forward),
            other => Err(ScanError::Config(format!("unknown sentence encoder '{other}'"))),
        }
    }
}

impl SentenceEncoder {
    pub fn encode(self, seq: &WordSequence, params: &ModelParams) -> Result<Matrix> {
        match self {
            SentenceEncoder::Bidirectional => encode_sentence(seq, params),
            SentenceEncoder::Forward => encode_sentence_unidirectional(seq, params),
        }
    }
}
