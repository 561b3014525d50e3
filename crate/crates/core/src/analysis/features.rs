//! Grayscale dumps of stage feature maps.

use std::path::{Path, PathBuf};

use crate::autodiff::Tape;
use crate::error::{config_err, shape_err, Result};
use crate::model::{Mode, Model, NUM_STAGES};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Which channels of a stage output to write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSelection {
    Explicit(Vec<usize>),
    /// The `k` channels the given output channel attends to most in the
    /// stage's last channel sub-block, by descending attention weight.
    TopK {
        output_channel: usize,
        k: usize,
    },
}

/// One written file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedMap {
    pub channel: usize,
    /// Attention weight for top-k selections.
    pub score: Option<f64>,
    pub path: PathBuf,
}

/// Min-max normalizes one `h x w` plane to bytes. A constant plane maps to zeros.
pub fn normalize_plane(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5), 8-bit.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Runs `image` (`[1, C, H, W]` or `[C, H, W]`) through the model and writes
/// the selected channels of stage `stage` (1-based) as PGM files into `out_dir`.
pub fn export_feature_maps<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    stage: usize,
    selection: &ChannelSelection,
    out_dir: &Path,
) -> Result<Vec<ExportedMap>> {
    if !(1..=NUM_STAGES).contains(&stage) {
        return Err(config_err!(
            "stage must be in 1..={NUM_STAGES}, got {stage}"
        ));
    }
    let image = match image.rank() {
        3 => image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => {
            return Err(shape_err!(
                "expected one image [1, C, H, W], got {:?}",
                image.shape()
            ))
        }
    };
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let x = tape.constant(image);
    let trace = model.forward_on_tape(&mut tape, &vars, x, Mode::Eval, &mut Rng::new(0))?;
    let fmap = tape.value(trace.stages[stage - 1]).to_f64_vec();
    let [_, h, w, c] = <[usize; 4]>::try_from(tape.shape(trace.stages[stage - 1])).unwrap();

    let picks: Vec<(usize, Option<f64>)> = match selection {
        ChannelSelection::Explicit(list) => {
            if let Some(&bad) = list.iter().find(|&&ch| ch >= c) {
                return Err(config_err!(
                    "channel {bad} out of range for stage {stage} with {c} channels"
                ));
            }
            list.iter().map(|&ch| (ch, None)).collect()
        }
        &ChannelSelection::TopK { output_channel, k } => {
            if output_channel >= c {
                return Err(config_err!(
                    "channel {output_channel} out of range for stage {stage} with {c} channels"
                ));
            }
            let weights = trace.channel_weights[stage - 1]
                .ok_or_else(|| config_err!("stage {stage} has no channel sub-block"))?;
            let wshape = tape.shape(weights).to_vec();
            let cg = wshape[3];
            if k == 0 || k > cg {
                return Err(config_err!(
                    "top-k must be in 1..={cg} (group width), got {k}"
                ));
            }
            let (g, row) = (output_channel / cg, output_channel % cg);
            let all = tape.value(weights).to_f64_vec();
            let start = (g * cg + row) * cg;
            let mut ranked: Vec<(usize, f64)> =
                all[start..start + cg].iter().copied().enumerate().collect();
            // stable sort keeps lower indices first on ties
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked
                .into_iter()
                .take(k)
                .map(|(j, s)| (g * cg + j, Some(s)))
                .collect()
        }
    };

    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(picks.len());
    for (rank, (ch, score)) in picks.into_iter().enumerate() {
        let plane: Vec<f64> = (0..h * w).map(|p| fmap[p * c + ch]).collect();
        let name = match score {
            Some(_) => format!("stage{stage}_rank{rank:02}_ch{ch:04}.pgm"),
            None => format!("stage{stage}_ch{ch:04}.pgm"),
        };
        let path = out_dir.join(name);
        std::fs::write(&path, encode_pgm(w, h, &normalize_plane(&plane)))?;
        written.push(ExportedMap {
            channel: ch,
            score,
            path,
        });
    }
    Ok(written)
}
