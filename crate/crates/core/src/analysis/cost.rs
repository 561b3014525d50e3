//! Parameter and FLOP accounting computed from a config alone.
//!
//! FLOPs follow the multiply-accumulate convention: one MAC counts as one
//! FLOP. Matrix products, convolutions and linear layers make up the
//! headline figure. Elementwise work (norms, softmax, GELU, pooling) is
//! itemized per row as `aux_flops` element counts and kept out of the
//! headline.

use serde::{Deserialize, Serialize};

use crate::error::{DavitError, Result};
use crate::model::{ModelConfig, StageGeometry, WindowSize, NUM_STAGES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Attention,
    Projection,
    Ffn,
    PatchEmbed,
    Cpe,
    Norm,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub term: Term,
    pub params: u64,
    pub flops: u64,
    pub aux_flops: u64,
}

/// Exact attention-core MACs of one dual block next to `2·P·C·(P_w + C_g)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionTerm {
    pub stage: usize,
    pub block: usize,
    pub tokens: u64,
    pub dim: u64,
    pub window_area: u64,
    pub group_dim: u64,
    pub window_flops: u64,
    pub channel_flops: u64,
    pub formula: u64,
    /// `exact - formula`; non-zero only when a window is clipped to a small grid.
    pub discrepancy: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    /// `[H, W]` of the input when FLOPs were counted.
    pub resolution: Option<[usize; 2]>,
    pub total_params: u64,
    /// Parameters excluding the classifier head.
    pub backbone_params: u64,
    pub total_flops: u64,
    pub total_aux_flops: u64,
    pub rows: Vec<CostRow>,
    pub attention_terms: Vec<AttentionTerm>,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// Summed headline FLOPs per term tag.
    pub fn flops_by_term(&self, term: Term) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.term == term)
            .map(|r| r.flops)
            .sum()
    }

    pub fn params_by_term(&self, term: Term) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.term == term)
            .map(|r| r.params)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

struct Builder {
    rows: Vec<CostRow>,
    with_flops: bool,
}

impl Builder {
    fn row(&mut self, name: String, term: Term, params: u64, flops: u64, aux: u64) {
        let (flops, aux_flops) = if self.with_flops {
            (flops, aux)
        } else {
            (0, 0)
        };
        self.rows.push(CostRow {
            name,
            term,
            params,
            flops,
            aux_flops,
        });
    }
}

/// Placeholder geometry for parameter-only counts.
fn nominal_geometry(cfg: &ModelConfig) -> Vec<StageGeometry> {
    let mut in_dim = cfg.in_chans;
    (0..NUM_STAGES)
        .map(|s| {
            let g = StageGeometry {
                h: 1,
                w: 1,
                dim: cfg.stage_dim(s),
                in_dim,
                window: 1,
            };
            in_dim = g.dim;
            g
        })
        .collect()
}

fn build(
    cfg: &ModelConfig,
    geometry: &[StageGeometry],
    with_flops: bool,
) -> (Vec<CostRow>, Vec<AttentionTerm>) {
    let mut b = Builder {
        rows: Vec::new(),
        with_flops,
    };
    let mut terms = Vec::new();
    for (s, g) in geometry.iter().enumerate() {
        let (p, d, cin) = (g.tokens() as u64, g.dim as u64, g.in_dim as u64);
        let k = cfg.patch_kernels[s] as u64;
        b.row(
            format!("stage{s}.embed.conv"),
            Term::PatchEmbed,
            cin * d * k * k + d,
            cin * d * k * k * p,
            0,
        );
        b.row(format!("stage{s}.embed.norm"), Term::Norm, 2 * d, 0, p * d);
        let heads = cfg.heads[s] as u64;
        let head_dim = d / heads;
        let pw = (g.window * g.window) as u64;
        for blk in 0..cfg.depths[s] {
            let mut exact = [0u64; 2];
            for (i, kind) in ["spatial", "channel"].into_iter().enumerate() {
                let pre = format!("stage{s}.block{blk}.{kind}");
                if cfg.cpe_enabled {
                    b.row(format!("{pre}.cpe1"), Term::Cpe, 9 * d + d, 9 * d * p, 0);
                }
                b.row(format!("{pre}.norm1"), Term::Norm, 2 * d, 0, p * d);
                b.row(
                    format!("{pre}.attn.qkvo"),
                    Term::Projection,
                    4 * (d * d + d),
                    4 * p * d * d,
                    0,
                );
                // scores plus weighted sum, and the softmax element count
                let (core, softmax) = if i == 0 {
                    (2 * p * pw * d, p * heads * pw)
                } else {
                    (2 * p * d * head_dim, d * head_dim)
                };
                exact[i] = core;
                b.row(
                    format!("{pre}.attn.core"),
                    Term::Attention,
                    0,
                    core,
                    softmax,
                );
                if cfg.ffn_enabled {
                    let hidden = d * cfg.ffn_ratio as u64;
                    if cfg.cpe_enabled {
                        b.row(format!("{pre}.cpe2"), Term::Cpe, 9 * d + d, 9 * d * p, 0);
                    }
                    b.row(format!("{pre}.norm2"), Term::Norm, 2 * d, 0, p * d);
                    b.row(
                        format!("{pre}.ffn"),
                        Term::Ffn,
                        2 * d * hidden + hidden + d,
                        2 * p * d * hidden,
                        p * hidden,
                    );
                }
            }
            if with_flops {
                let nominal_pw = match cfg.window {
                    WindowSize::Side(side) => (side * side) as u64,
                    WindowSize::Global => p,
                };
                let formula = 2 * p * d * (nominal_pw + head_dim);
                terms.push(AttentionTerm {
                    stage: s,
                    block: blk,
                    tokens: p,
                    dim: d,
                    window_area: pw,
                    group_dim: head_dim,
                    window_flops: exact[0],
                    channel_flops: exact[1],
                    formula,
                    discrepancy: (exact[0] + exact[1]) as i64 - formula as i64,
                });
            }
        }
    }
    let last = geometry.last().unwrap();
    let (d, p, k) = (
        last.dim as u64,
        last.tokens() as u64,
        cfg.num_classes as u64,
    );
    b.row("head.norm".into(), Term::Head, 2 * d, 0, p * d + d);
    b.row("head.fc".into(), Term::Head, d * k + k, d * k, 0);
    (b.rows, terms)
}

fn assemble(
    cfg: &ModelConfig,
    resolution: Option<[usize; 2]>,
    rows: Vec<CostRow>,
    terms: Vec<AttentionTerm>,
) -> CostReport {
    let total_params = rows.iter().map(|r| r.params).sum();
    let head: u64 = rows
        .iter()
        .filter(|r| r.term == Term::Head)
        .map(|r| r.params)
        .sum();
    CostReport {
        config: cfg.name.clone(),
        resolution,
        total_params,
        backbone_params: total_params - head,
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_aux_flops: rows.iter().map(|r| r.aux_flops).sum(),
        rows,
        attention_terms: terms,
    }
}

/// Exact parameter count with a per-layer breakdown. Layout permutations
/// (`BlockLayout`) and window sizes do not change the count.
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let (rows, _) = build(cfg, &nominal_geometry(cfg), false);
    Ok(assemble(cfg, None, rows, Vec::new()))
}

/// Parameters and per-image FLOPs at an `h x w` input.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<CostReport> {
    let geometry = cfg.stage_geometry(h, w)?;
    let (rows, terms) = build(cfg, &geometry, true);
    Ok(assemble(cfg, Some([h, w]), rows, terms))
}

/// Attention-core FLOPs at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub resolution: usize,
    /// Tokens at the first stage.
    pub tokens: u64,
    pub per_stage: [u64; NUM_STAGES],
    pub attention_flops: u64,
    /// `attention_flops / tokens`
    pub ratio: f64,
}

/// Attention-term FLOPs of `cfg` at each square resolution.
pub fn scaling_probe(cfg: &ModelConfig, resolutions: &[usize]) -> Result<Vec<ScalingRow>> {
    if resolutions.len() < 2 {
        return Err(DavitError::Contract(
            "scaling_probe needs at least two resolutions".into(),
        ));
    }
    resolutions
        .iter()
        .map(|&res| {
            let report = count_flops(cfg, res, res)?;
            let geometry = cfg.stage_geometry(res, res)?;
            let mut per_stage = [0u64; NUM_STAGES];
            for t in &report.attention_terms {
                per_stage[t.stage] += t.window_flops + t.channel_flops;
            }
            let attention_flops = per_stage.iter().sum();
            let tokens = geometry[0].tokens() as u64;
            Ok(ScalingRow {
                resolution: res,
                tokens,
                per_stage,
                attention_flops,
                ratio: attention_flops as f64 / tokens as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_totals() {
        let r = count_flops(&ModelConfig::preset("small").unwrap(), 224, 224).unwrap();
        assert_eq!(r.rows.iter().map(|x| x.params).sum::<u64>(), r.total_params);
        assert_eq!(r.rows.iter().map(|x| x.flops).sum::<u64>(), r.total_flops);
        assert_eq!(
            r.rows.iter().map(|x| x.aux_flops).sum::<u64>(),
            r.total_aux_flops
        );
    }

    #[test]
    fn attention_formula_is_exact_when_windows_tile() {
        let r = count_flops(&ModelConfig::preset("tiny").unwrap(), 224, 224).unwrap();
        assert_eq!(r.attention_terms.len(), 6);
        assert!(r.attention_terms.iter().all(|t| t.discrepancy == 0));
        let t = &r.attention_terms[0];
        assert_eq!(t.formula, 2 * 3136 * 96 * (49 + 32));
    }

    #[test]
    fn clipped_windows_are_itemized() {
        let r = count_flops(&ModelConfig::preset("micro").unwrap(), 32, 32).unwrap();
        let last = r.attention_terms.last().unwrap();
        assert_eq!(last.window_area, 1);
        assert!(last.discrepancy < 0);
    }

    #[test]
    fn params_do_not_depend_on_resolution() {
        let cfg = ModelConfig::preset("base").unwrap();
        let a = count_params(&cfg).unwrap().total_params;
        let b = count_flops(&cfg, 224, 224).unwrap().total_params;
        let c = count_flops(
            &ModelConfig::preset_for_resolution("base", 384).unwrap(),
            384,
            384,
        )
        .unwrap()
        .total_params;
        assert_eq!((a, a), (b, c));
    }

    #[test]
    fn probe_needs_two_resolutions() {
        assert!(scaling_probe(&ModelConfig::preset("tiny").unwrap(), &[224]).is_err());
    }

    #[test]
    fn report_json_has_stable_fields() {
        let r = count_flops(&ModelConfig::preset("tiny").unwrap(), 224, 224).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "total_params",
            "total_flops",
            "total_aux_flops",
            "rows",
            "attention_terms",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["rows"][0]["term"], "patch_embed");
    }
}
