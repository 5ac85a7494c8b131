//! Effective-receptive-field measurement and parameter accounting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapters::adapter_param_count;
use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

/// Thresholds reported by [`export_erf`].
pub const ERF_THRESHOLDS: [f64; 3] = [0.2, 0.5, 0.99];

const ERF_CHUNK: usize = 8;

/// Accumulated per-pixel contribution to the central output token.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub size: usize,
    /// Row-major `size×size`, normalised to a maximum of 1 unless degenerate.
    pub matrix: Vec<f64>,
    pub num_images: usize,
    /// Every accumulated contribution was zero; the matrix is left unnormalised.
    pub degenerate: bool,
}

impl ErfMap {
    pub fn from_matrix(size: usize, mut matrix: Vec<f64>, num_images: usize) -> Result<Self> {
        if matrix.len() != size * size {
            return Err(Error::Dimension {
                op: "erf map",
                lhs: vec![size, size],
                rhs: vec![matrix.len()],
            });
        }
        if matrix.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(
                "ERF contributions must be finite and non-negative".into(),
            ));
        }
        let max = matrix.iter().cloned().fold(0.0, f64::max);
        let degenerate = max == 0.0;
        if !degenerate {
            matrix.iter_mut().for_each(|v| *v /= max);
        }
        Ok(ErfMap {
            size,
            matrix,
            num_images,
            degenerate,
        })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.size + col]
    }
}

/// 0-based index of the "central point" of an extent: `⌈n/2⌉` in 1-based terms.
pub fn center_index(n: usize) -> usize {
    n.div_ceil(2) - 1
}

/// Accumulates `|∂(Σ_c token_center[c]) / ∂image|` over images and input
/// channels, where `token_center` is the central spatial token of the last
/// block's output.
pub fn erf_map(model: &Model, images: &Tensor) -> Result<ErfMap> {
    let cfg = model.config();
    let shape = images.shape();
    let s = cfg.image_size;
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != s || shape[3] != s {
        return Err(Error::Dimension {
            op: "erf_map",
            lhs: shape.to_vec(),
            rhs: vec![cfg.in_channels, s, s],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    let g = cfg.grid();
    let center = usize::from(cfg.cls_token) + center_index(g) * g + center_index(g);
    let per_image = c * s * s;
    let mut acc = vec![0.0; s * s];
    for start in (0..n).step_by(ERF_CHUNK) {
        let count = ERF_CHUNK.min(n - start);
        let chunk = Tensor::new(
            &[count, c, s, s],
            images.data()[start * per_image..(start + count) * per_image].to_vec(),
        )?
        .tracked();
        let mut tape = Tape::new();
        let x = tape.leaf(&chunk);
        let tokens = model.forward_tokens(&mut tape, x)?;
        let token = tape.narrow(tokens, 1, center, 1)?;
        let scalar = tape.sum(token);
        let grads = tape.backward(scalar)?;
        if let Some(grad) = grads.get(&chunk) {
            for plane in grad.chunks_exact(s * s) {
                acc.iter_mut().zip(plane).for_each(|(a, g)| *a += g.abs());
            }
        }
    }
    ErfMap::from_matrix(s, acc, n)
}

/// Inclusive-exclusive 2-D prefix sums.
struct SummedArea {
    size: usize,
    table: Vec<f64>,
}

impl SummedArea {
    fn new(size: usize, m: &[f64]) -> Self {
        let w = size + 1;
        let mut table = vec![0.0; w * w];
        for r in 0..size {
            let mut row = 0.0;
            for c in 0..size {
                row += m[r * size + c];
                table[(r + 1) * w + c + 1] = table[r * w + c + 1] + row;
            }
        }
        SummedArea { size, table }
    }

    /// Mass of rows `r0..r1`, cols `c0..c1` (exclusive ends).
    fn rect(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let w = self.size + 1;
        self.table[r1 * w + c1] - self.table[r0 * w + c1] - self.table[r1 * w + c0]
            + self.table[r0 * w + c0]
    }
}

/// `(a/S)²` for the smallest odd side `a` of a square centred on the central
/// pixel (clipped at the borders) holding at least a fraction `t` of the
/// total contribution. `a` is capped at `S`.
pub fn erf_area_ratio(e: &ErfMap, t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Config(format!("threshold {t} must lie in (0, 1)")));
    }
    if e.degenerate {
        return Err(Error::DegenerateErf);
    }
    let s = e.size;
    let sat = SummedArea::new(s, &e.matrix);
    let total = sat.rect(0, s, 0, s);
    let c = center_index(s);
    let mut half = 0;
    loop {
        let (lo, hi) = (c.saturating_sub(half), (c + half + 1).min(s));
        if sat.rect(lo, hi, lo, hi) >= t * total || (lo == 0 && hi == s) {
            let side = (2 * half + 1).min(s) as f64;
            return Ok((side / s as f64).powi(2));
        }
        half += 1;
    }
}

/// Trainable and frozen element counts of one parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl GroupCount {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    fn add(&mut self, n: usize, trainable: bool) {
        if trainable {
            self.trainable += n;
        } else {
            self.frozen += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub backbone: GroupCount,
    pub adapters: GroupCount,
    pub head: GroupCount,
    /// Element count of each adapter module, by enumeration.
    pub per_adapter: Vec<usize>,
    /// Closed-form prediction for a single adapter.
    pub per_adapter_closed_form: usize,
    /// Every enumerated adapter equals the closed form.
    pub matches: bool,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.backbone.total() + self.adapters.total() + self.head.total()
    }

    pub fn trainable(&self) -> usize {
        self.backbone.trainable + self.adapters.trainable + self.head.trainable
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:>12} {:>12} {:>12}",
            "group", "trainable", "frozen", "total"
        )?;
        for (name, g) in [
            ("backbone", self.backbone),
            ("adapters", self.adapters),
            ("head", self.head),
        ] {
            writeln!(
                f,
                "{:<10} {:>12} {:>12} {:>12}",
                name,
                g.trainable,
                g.frozen,
                g.total()
            )?;
        }
        writeln!(
            f,
            "{:<10} {:>12} {:>12} {:>12}",
            "all",
            self.trainable(),
            self.total() - self.trainable(),
            self.total()
        )?;
        let enumerated = self.per_adapter.first().copied().unwrap_or(0);
        writeln!(f, "adapters: {}", self.per_adapter.len())?;
        writeln!(f, "per-adapter enumerated: {enumerated}")?;
        writeln!(
            f,
            "per-adapter closed form: {}",
            self.per_adapter_closed_form
        )?;
        write!(f, "match={}", self.matches)
    }
}

pub fn param_report(m: &Model) -> ParamReport {
    let mut report = ParamReport {
        backbone: GroupCount::default(),
        adapters: GroupCount::default(),
        head: GroupCount::default(),
        per_adapter: Vec::new(),
        per_adapter_closed_form: 0,
        matches: true,
    };
    for (name, t) in m.named_params() {
        let group = if name.contains("adapter") {
            &mut report.adapters
        } else if name.starts_with("head.") {
            &mut report.head
        } else {
            &mut report.backbone
        };
        group.add(t.numel(), t.requires_grad());
    }
    for bp in &m.blocks {
        for a in [&bp.adapter_msa, &bp.adapter_ffn].into_iter().flatten() {
            report.per_adapter.push(a.param_count());
        }
    }
    if m.config().placement.is_some() {
        report.per_adapter_closed_form = adapter_param_count(&m.lka_config());
    }
    report.matches = report
        .per_adapter
        .iter()
        .all(|&n| n == report.per_adapter_closed_form);
    report
}

/// Quantises the map to 16-bit samples: `round(v · 65535)`.
pub fn quantize(e: &ErfMap) -> Vec<u16> {
    e.matrix
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

pub fn write_pgm(path: &Path, width: usize, height: usize, samples: &[u16]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for s in samples {
        bytes.extend_from_slice(&s.to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary 16-bit PGM written by [`write_pgm`]: `(width, height, samples)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "{}: truncated PGM header",
                path.display()
            )));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(Error::Format(format!(
            "{}: not a 16-bit P5 PGM",
            path.display()
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM extent {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() != 2 * w * h {
        return Err(Error::Length {
            expected: 2 * w * h,
            found: payload.len(),
        });
    }
    let samples = payload
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((w, h, samples))
}

/// Writes `erf.pgm` and `erf.csv` (header `threshold,area_ratio`) into `dir`.
pub fn export_erf(e: &ErfMap, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut csv = String::from("threshold,area_ratio\n");
    for t in ERF_THRESHOLDS {
        csv.push_str(&format!("{t},{}\n", erf_area_ratio(e, t)?));
    }
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let pgm = dir.join("erf.pgm");
    let csv_path = dir.join("erf.csv");
    write_pgm(&pgm, e.size, e.size, &quantize(e))?;
    fs::write(&csv_path, csv).map_err(|err| Error::io(&csv_path, err))?;
    Ok((pgm, csv_path))
}
