//! Per-visual-token activation magnitudes at the fusion depths and the
//! final depth, written as CSV grids and ASCII graymaps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mllm::{tokenizer, EmmaModel};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Residual-stream depth (number of LLM blocks applied).
    pub depth: usize,
    pub grid: usize,
    /// L2 norm of each visual token's hidden state, row-major.
    pub norms: Vec<f64>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.norms.chunks(self.grid) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(s, "{}", line.join(",")).expect("string write");
        }
        s
    }

    /// Min-max normalised to `0..=255`. A constant map becomes all zeros.
    pub fn gray_levels(&self) -> Vec<u8> {
        let (lo, hi) = self
            .norms
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = hi - lo;
        self.norms
            .iter()
            .map(|&v| {
                if range > 0.0 {
                    ((v - lo) / range * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    /// Plain (P2) portable graymap.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.grid, self.grid);
        for row in self.gray_levels().chunks(self.grid) {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(s, "{}", line.join(" ")).expect("string write");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 2]> {
        let csv = dir.join(format!("layer{}.csv", self.depth));
        let pgm = dir.join(format!("layer{}.pgm", self.depth));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&pgm, self.to_pgm())?;
        Ok([csv, pgm])
    }
}

/// True when the checkpoint's decoder never received gradient.
pub fn decoder_untrained<T: Scalar>(model: &EmmaModel<T>) -> bool {
    !model.cfg.use_pal
}

/// Visual-token activation magnitudes for `image` under `prompt`.
/// Requires the alignment heads, i.e. a training checkpoint.
pub fn activation_heatmaps<T: Scalar>(model: &EmmaModel<T>, image: &Tensor<T>, prompt: &str) -> Result<Vec<Heatmap>> {
    if model.decoder.is_none() {
        return Err(Error::MissingComponent("image decoder"));
    }
    let ex = model.example(image.clone(), tokenizer::encode(prompt)?)?;
    let mut g = Graph::no_grad();
    let seq = model.build_sequence(&mut g, &ex.features, &ex.tokens)?;
    let (_, visual) = model.llm_forward(&mut g, &seq)?;
    let d = model.cfg.d_model;
    Ok(model
        .fusion_depths()
        .into_iter()
        .zip(visual)
        .map(|(depth, v)| Heatmap {
            depth,
            grid: model.cfg.grid(),
            norms: g
                .value(v)
                .chunks_exact(d)
                .map(|row| row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt())
                .collect(),
        })
        .collect())
}

/// Computes the heatmaps and writes `layer<depth>.{csv,pgm}` into `dir`.
pub fn dump_activations<T: Scalar>(
    model: &EmmaModel<T>,
    image: &Tensor<T>,
    prompt: &str,
    dir: &Path,
) -> Result<Vec<Heatmap>> {
    let maps = activation_heatmaps(model, image, prompt)?;
    std::fs::create_dir_all(dir)?;
    for m in &maps {
        m.write(dir)?;
    }
    Ok(maps)
}

/// Parses a CSV grid written by [`Heatmap::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|e| Error::InvalidArgument(format!("heatmap csv: {e}")))
                })
                .collect()
        })
        .collect()
}
