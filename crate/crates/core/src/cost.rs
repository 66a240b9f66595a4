//! Analytic cost accounting: parameters, multiply-accumulates and a
//! forward-only peak-activation estimate, all pure functions of
//! `(config, h, w)`.
//!
//! MACs count the multiplies of every convolution, transposed convolution and
//! both attention matmuls (`Q·K` and `A·V`). Elementwise ops, pooling and
//! softmax are free. A transposed convolution costs `k²·C_in·C_out` per *input*
//! position. All counts are for a batch of one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::net::{AttentionKind, NetworkConfig, Recursion, SIZE_MULTIPLE};
use crate::nn::ConvSpec;
use crate::nonlocal::SamplerSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate is one FLOP.
    #[default]
    Macs,
    /// One multiply-accumulate is two FLOPs.
    TwiceMacs,
}

impl FlopConvention {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "macs" => Ok(FlopConvention::Macs),
            "2macs" | "twice_macs" => Ok(FlopConvention::TwiceMacs),
            _ => Err(Error::Config(format!("unknown FLOP convention {s:?} (macs or 2macs)"))),
        }
    }

    pub fn flops(self, macs: u64) -> u64 {
        match self {
            FlopConvention::Macs => macs,
            FlopConvention::TwiceMacs => 2 * macs,
        }
    }
}

/// One layer application.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub op: &'static str,
    /// Zero for repeated applications of a shared block.
    pub params: u64,
    pub macs: u64,
    pub out_shape: [usize; 3],
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<CostRow>,
    pub params: u64,
    pub macs: u64,
    /// Multiplies of the two attention matmuls alone.
    pub attention_macs: u64,
    pub peak_activation: u64,
    /// Largest single activation and the op producing it.
    pub largest_activation: (String, u64),
}

impl CostReport {
    pub fn flops(&self, convention: FlopConvention) -> u64 {
        convention.flops(self.macs)
    }

    /// Line-delimited JSON, one record per row followed by a totals record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        let totals = serde_json::json!({
            "total": true,
            "height": self.height,
            "width": self.width,
            "params": self.params,
            "macs": self.macs,
            "attention_macs": self.attention_macs,
            "peak_activation": self.peak_activation,
        });
        out.push_str(&totals.to_string());
        out.push('\n');
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:<10} {:>10} {:>14}  out", "layer", "op", "params", "macs")?;
        for r in &self.rows {
            let [c, h, w] = r.out_shape;
            writeln!(f, "{:<28} {:<10} {:>10} {:>14}  {c}x{h}x{w}", r.layer, r.op, r.params, r.macs)?;
        }
        writeln!(f, "{:<39} {:>10} {:>14}", "total", self.params, self.macs)?;
        write!(
            f,
            "input {}x{}, attention macs {}, peak activation {} elements",
            self.height, self.width, self.attention_macs, self.peak_activation
        )
    }
}

/// One produced tensor in the forward schedule.
#[derive(Clone, Debug)]
struct Node {
    name: String,
    elems: u64,
    inputs: Vec<usize>,
}

/// Feature map handle: node index plus `[C, H, W]`.
#[derive(Clone, Copy, Debug)]
struct Map {
    id: usize,
    c: usize,
    h: usize,
    w: usize,
}

struct Walker<'a> {
    cfg: &'a NetworkConfig,
    rows: Vec<CostRow>,
    nodes: Vec<Node>,
    counted: std::collections::HashSet<String>,
    attention_macs: u64,
}

impl<'a> Walker<'a> {
    fn node(&mut self, name: &str, c: usize, h: usize, w: usize, inputs: &[usize]) -> Map {
        self.nodes.push(Node {
            name: name.to_owned(),
            elems: (c * h * w) as u64,
            inputs: inputs.to_vec(),
        });
        Map {
            id: self.nodes.len() - 1,
            c,
            h,
            w,
        }
    }

    /// Parameters of a named layer count once however often it runs.
    fn params_once(&mut self, name: &str, n: usize) -> u64 {
        if self.counted.insert(name.to_owned()) {
            n as u64
        } else {
            0
        }
    }

    fn conv(&mut self, name: &str, spec: ConvSpec, x: Map) -> Map {
        let ext = spec.dilation * (spec.kernel - 1) + 1;
        let oh = (x.h + 2 * spec.padding - ext) / spec.stride + 1;
        let ow = (x.w + 2 * spec.padding - ext) / spec.stride + 1;
        let macs = (oh * ow * spec.weight_count()) as u64;
        self.conv_row(name, "conv", spec, macs, x, oh, ow)
    }

    fn conv_transpose(&mut self, name: &str, spec: ConvSpec, x: Map) -> Map {
        let oh = (x.h - 1) * spec.stride + spec.kernel - 2 * spec.padding;
        let ow = (x.w - 1) * spec.stride + spec.kernel - 2 * spec.padding;
        let macs = (x.h * x.w * spec.weight_count()) as u64;
        self.conv_row(name, "deconv", spec, macs, x, oh, ow)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_row(&mut self, name: &str, op: &'static str, spec: ConvSpec, macs: u64, x: Map, oh: usize, ow: usize) -> Map {
        let params = self.params_once(name, spec.param_count());
        self.rows.push(CostRow {
            layer: name.to_owned(),
            op,
            params,
            macs,
            out_shape: [spec.out_ch, oh, ow],
        });
        self.node(name, spec.out_ch, oh, ow, &[x.id])
    }

    fn unary(&mut self, name: &str, x: Map) -> Map {
        self.node(name, x.c, x.h, x.w, &[x.id])
    }

    fn binary(&mut self, name: &str, a: Map, b: Map) -> Map {
        self.node(name, a.c, a.h, a.w, &[a.id, b.id])
    }

    fn residual_block(&mut self, name: &str, x: Map) -> Map {
        let spec = ConvSpec::same(x.c, x.c, 3, 1);
        let h = self.conv(&format!("{name}.conv1"), spec, x);
        let h = self.unary("relu", h);
        let h = self.conv(&format!("{name}.conv2"), spec, h);
        self.binary("add", x, h)
    }

    fn attention_block(&mut self, name: &str, kind: BlockKind, x: Map) -> Map {
        let c = x.c;
        let fe = format!("{name}.fe");
        let mid = if kind == BlockKind::Fab {
            self.conv(&format!("{fe}.conv"), ConvSpec::same(c, c, 3, 1), x)
        } else {
            let specs = if kind == BlockKind::ParallelFe {
                [ConvSpec::same(c, c, 3, 1); 3]
            } else {
                [
                    ConvSpec::same(c, c, 1, 1),
                    ConvSpec::same(c, c, 3, 1),
                    ConvSpec::same(c, c, 3, 2),
                ]
            };
            let s: Vec<Map> = specs
                .into_iter()
                .enumerate()
                .map(|(i, spec)| self.conv(&format!("{fe}.stream{}", i + 1), spec, x))
                .collect();
            let cat = self.node("concat", 3 * c, x.h, x.w, &[s[0].id, s[1].id, s[2].id]);
            self.conv(&format!("{fe}.fuse"), ConvSpec::same(3 * c, c, 1, 1), cat)
        };
        let mid = self.unary("relu", mid);
        let res = self.binary("add", x, mid);
        let y = self.conv(&format!("{fe}.out"), ConvSpec::same(c, c, 3, 1), res);

        let cr = c / self.cfg.ca_reduction;
        let g = self.node("gap", c, 1, 1, &[y.id]);
        let g = self.conv(&format!("{name}.ca.reduce"), ConvSpec::same(c, cr, 1, 1), g);
        let g = self.unary("relu", g);
        let g = self.conv(&format!("{name}.ca.expand"), ConvSpec::same(cr, c, 1, 1), g);
        let g = self.unary("sigmoid", g);
        let y = self.binary("mul", y, g);

        let sr = c / self.cfg.sa_reduction;
        let (k, d) = if kind == BlockKind::Msfab { (3, 2) } else { (1, 1) };
        let m = self.conv(&format!("{name}.sa.reduce"), ConvSpec::same(c, sr, k, d), y);
        let m = self.unary("relu", m);
        let m = self.conv(&format!("{name}.sa.project"), ConvSpec::same(sr, 1, k, d), m);
        let m = self.unary("sigmoid", m);
        let y = self.binary("mul", y, m);
        self.binary("add", x, y)
    }

    /// Every application's output, in order.
    fn stage(&mut self, name: &str, i: usize, mut x: Map) -> Vec<Map> {
        let depth = self.cfg.stage_depths[i];
        let kind = self.cfg.stage_kind(i);
        let mut outs = Vec::with_capacity(depth);
        for j in 0..depth {
            let block = match self.cfg.recursion {
                Recursion::SharedWeights => format!("{name}.block"),
                Recursion::Independent => format!("{name}.block{j}"),
            };
            x = if kind == BlockKind::Rb {
                self.residual_block(&block, x)
            } else {
                self.attention_block(&block, kind, x)
            };
            outs.push(x);
        }
        outs
    }

    fn tokens(&mut self, name: &str, e: Map, sampler: &SamplerSpec) -> (Map, usize) {
        let s = sampler.token_count(e.h, e.w);
        let pooled: Vec<usize> = match sampler {
            SamplerSpec::None => return (e, s),
            SamplerSpec::Spp { output_sizes } => output_sizes
                .iter()
                .map(|&o| self.node(&format!("{name}.spp{o}"), e.c, o, o, &[e.id]).id)
                .collect(),
            SamplerSpec::Spds { factors } => factors
                .iter()
                .map(|&f| self.node(&format!("{name}.spds{f}"), e.c, e.h / f, e.w / f, &[e.id]).id)
                .collect(),
        };
        if pooled.len() == 1 {
            let id = pooled[0];
            return (Map { id, c: e.c, h: 1, w: s }, s);
        }
        (self.node(&format!("{name}.concat"), e.c, 1, s, &pooled), s)
    }

    fn matmul(&mut self, name: &str, a: Map, b: Map, rows: usize, cols: usize, inner: usize) -> Map {
        let macs = (rows * cols * inner) as u64;
        self.attention_macs += macs;
        self.rows.push(CostRow {
            layer: name.to_owned(),
            op: "matmul",
            params: 0,
            macs,
            out_shape: [1, rows, cols],
        });
        self.node(name, 1, rows, cols, &[a.id, b.id])
    }

    fn non_local(&mut self, name: &str, query: Map, fused: Map, sampler: &SamplerSpec) -> Map {
        let (c, e) = (query.c, self.cfg.embed_channels());
        let n = query.h * query.w;
        let proj = ConvSpec::same(c, e, 1, 1);
        let q = self.conv(&format!("{name}.query"), proj, query);
        let q = self.unary("query.tokens", q);
        let k = self.conv(&format!("{name}.key"), proj, fused);
        let (k, s) = self.tokens("key", k, sampler);
        let v = self.conv(&format!("{name}.value"), proj, fused);
        let (v, _) = self.tokens("value", v, sampler);
        let v = self.unary("value.tokens", v);
        let sim = self.matmul(&format!("{name}.similarity"), q, k, n, s, e);
        let a = self.unary("softmax", sim);
        let y = self.matmul(&format!("{name}.aggregate"), a, v, n, e, s);
        let y = self.node("attn.untokens", e, query.h, query.w, &[y.id]);
        let y = self.conv(&format!("{name}.out"), ConvSpec::same(e, c, 1, 1), y);
        self.binary("add", query, y)
    }

    fn network(&mut self, h: usize, w: usize) {
        let cfg = self.cfg;
        let c = cfg.base_channels;
        let x = self.node("input", 3, h, w, &[]);
        let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE), w.next_multiple_of(SIZE_MULTIPLE));
        let x = if (ph, pw) != (h, w) {
            self.node("pad", 3, ph, pw, &[x.id])
        } else {
            x
        };
        let f0 = self.conv("head", ConvSpec::same(3, c, 3, 1), x);
        let f1 = *self.stage("enc1", 0, f0).last().expect("positive depth");
        let d1 = self.conv("down1", cfg.down_spec(c), f1);
        let f2 = *self.stage("enc2", 1, d1).last().expect("positive depth");
        let d2 = self.conv("down2", cfg.down_spec(2 * c), f2);
        let level3 = self.stage("enc3", 2, d2);
        let f3 = *level3.last().expect("positive depth");
        let f3 = match cfg.attention {
            AttentionKind::None => f3,
            AttentionKind::NonLocal => self.non_local("attn.nl", f3, f3, &SamplerSpec::None),
            AttentionKind::CrossNonLocal => {
                let cat = if level3.len() == 1 {
                    f3
                } else {
                    let ids: Vec<usize> = level3.iter().map(|m| m.id).collect();
                    self.node("fusion.concat", f3.c * level3.len(), f3.h, f3.w, &ids)
                };
                let spec = ConvSpec::same(cat.c, f3.c, 1, 1);
                let fused = self.conv("attn.fusion", spec, cat);
                self.non_local("attn.nl", f3, fused, &cfg.sampler)
            }
        };
        let u1 = self.conv_transpose("up1", cfg.up_spec(4 * c), f3);
        let u1 = self.binary("add", u1, f2);
        let f4 = *self.stage("dec2", 3, u1).last().expect("positive depth");
        let u2 = self.conv_transpose("up2", cfg.up_spec(2 * c), f4);
        let u2 = self.binary("add", u2, f1);
        let f5 = *self.stage("dec1", 4, u2).last().expect("positive depth");
        let mut out = self.conv("tail", ConvSpec::same(c, 3, 3, 1), f5);
        if cfg.global_residual {
            out = self.binary("add", out, x);
        }
        if (ph, pw) != (h, w) {
            self.node("crop", 3, h, w, &[out.id]);
        }
    }

    /// Live-set walk over the schedule: a tensor is held from the step that
    /// produces it through its last consumer; the final output stays live.
    fn peak(&self) -> u64 {
        let n = self.nodes.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                last_use[j] = last_use[j].max(i);
            }
        }
        last_use[n - 1] = n;
        let mut live = 0u64;
        let mut peak = 0u64;
        let mut release: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for (j, &u) in last_use.iter().enumerate() {
            release[u].push(j);
        }
        for i in 0..n {
            live += self.nodes[i].elems;
            peak = peak.max(live);
            for &j in &release[i] {
                live -= self.nodes[j].elems;
            }
        }
        peak
    }
}

fn check_dims(cfg: &NetworkConfig, h: usize, w: usize) -> Result<()> {
    cfg.validate()?;
    if h < SIZE_MULTIPLE || w < SIZE_MULTIPLE {
        return Err(Error::pre("cost", format!("input {h}x{w} smaller than {SIZE_MULTIPLE}x{SIZE_MULTIPLE}")));
    }
    if cfg.attention == AttentionKind::CrossNonLocal {
        let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE) / 4, w.next_multiple_of(SIZE_MULTIPLE) / 4);
        cfg.sampler.check_dims(ph, pw)?;
    }
    Ok(())
}

/// Full per-layer report for an `h × w` input.
pub fn cost_report(cfg: &NetworkConfig, h: usize, w: usize) -> Result<CostReport> {
    check_dims(cfg, h, w)?;
    let mut walker = Walker {
        cfg,
        rows: Vec::new(),
        nodes: Vec::new(),
        counted: Default::default(),
        attention_macs: 0,
    };
    walker.network(h, w);
    // first producer of the largest size, so a softmax never shadows its input
    let largest = walker.nodes.iter().fold(None::<&Node>, |best, n| match best {
        Some(b) if b.elems >= n.elems => Some(b),
        _ => Some(n),
    });
    let largest = largest.map(|n| (n.name.clone(), n.elems)).expect("non-empty schedule");
    Ok(CostReport {
        height: h,
        width: w,
        params: walker.rows.iter().map(|r| r.params).sum(),
        macs: walker.rows.iter().map(|r| r.macs).sum(),
        attention_macs: walker.attention_macs,
        peak_activation: walker.peak(),
        largest_activation: largest,
        rows: walker.rows,
    })
}

/// Parameter count, independent of input size.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    Ok(cost_report(cfg, 64, 64)?.params)
}

pub fn count_flops(cfg: &NetworkConfig, h: usize, w: usize, convention: FlopConvention) -> Result<u64> {
    Ok(cost_report(cfg, h, w)?.flops(convention))
}

/// Largest number of simultaneously live forward activation elements.
pub fn peak_activation_estimate(cfg: &NetworkConfig, h: usize, w: usize) -> Result<u64> {
    Ok(cost_report(cfg, h, w)?.peak_activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Preset;

    #[test]
    fn single_conv_macs() {
        let mut cfg = NetworkConfig::preset(Preset::Tiny);
        cfg.base_channels = 32;
        let r = cost_report(&cfg, 256, 256).unwrap();
        let head = r.rows.iter().find(|r| r.layer == "head").unwrap();
        assert_eq!(head.macs, 3 * 32 * 9 * 256 * 256);
    }

    #[test]
    fn shared_blocks_count_parameters_once() {
        let r = cost_report(&NetworkConfig::preset(Preset::B), 64, 64).unwrap();
        let enc3: Vec<&CostRow> = r.rows.iter().filter(|r| r.layer == "enc3.block.fe.out").collect();
        assert_eq!(enc3.len(), 4);
        assert!(enc3[0].params > 0 && enc3[1..].iter().all(|r| r.params == 0));
        assert!(enc3.iter().all(|r| r.macs == enc3[0].macs));
    }

    #[test]
    fn peak_walk_on_a_chain() {
        let cfg = NetworkConfig::preset(Preset::Tiny);
        let mut w = Walker {
            cfg: &cfg,
            rows: Vec::new(),
            nodes: Vec::new(),
            counted: Default::default(),
            attention_macs: 0,
        };
        let a = w.node("a", 1, 1, 10, &[]);
        let b = w.node("b", 1, 1, 5, &[a.id]);
        let c = w.node("c", 1, 1, 7, &[b.id]);
        w.node("d", 1, 1, 1, &[a.id, c.id]);
        // step c holds a (still needed by d), b and c
        assert_eq!(w.peak(), 22);
    }

    #[test]
    fn undersized_or_indivisible_inputs_are_rejected() {
        let cfg = NetworkConfig::preset(Preset::B);
        assert!(cost_report(&cfg, 8, 64).is_err());
        let mut spp = cfg.clone();
        spp.sampler = SamplerSpec::spp();
        // level 3 is 4×4 here, smaller than the 8×8 pool
        assert!(cost_report(&spp, 16, 16).is_err());
        assert!(FlopConvention::parse("gflops").is_err());
    }
}
