//! Encoder-decoder backbone with channel-attention conv blocks.
//!
//! Level `i` works at `H / 2^i` with `base * 2^i` channels. Each block is
//! conv3x3 -> PReLU -> conv3x3 -> PReLU -> optional channel attention.
//! Decoder steps upsample (nearest), conv3x3 + PReLU down to the skip width,
//! concatenate with the skip and run a block. The head is a plain conv3x3.

use rand::Rng;

use super::config::CBUnetConfig;
use crate::error::Result;
use crate::nn::{he_uniform, Bound, ParamStore, Tape, Tensor, Var, HIST_BINS};

/// Hidden width of the histogram branch.
pub const HIST_HIDDEN: usize = 64;

/// Channel-attention bottleneck width.
pub fn attention_hidden(c: usize) -> usize {
    (c / 4).max(1)
}

/// One row of the per-layer cost table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// Whether the cost grows with the image area.
    pub spatial: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Unet {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub cfg: CBUnetConfig,
    pub hist_branch: bool,
}

#[derive(Debug)]
struct Costs {
    rows: Vec<LayerCost>,
}

impl Costs {
    fn conv(&mut self, name: String, cin: usize, cout: usize, hw: usize) {
        let (cin, cout, hw) = (cin as u64, cout as u64, hw as u64);
        self.rows.push(LayerCost {
            name,
            kind: "conv3x3",
            params: 9 * cin * cout + cout,
            flops: 2 * 9 * cin * cout * hw,
            spatial: true,
        });
    }

    fn fc(&mut self, name: String, fin: usize, fout: usize) {
        let (fin, fout) = (fin as u64, fout as u64);
        self.rows.push(LayerCost {
            name,
            kind: "fc",
            params: fin * fout + fout,
            flops: 2 * fin * fout,
            spatial: false,
        });
    }

    fn elem(&mut self, name: String, kind: &'static str, n: usize, spatial: bool) {
        self.rows.push(LayerCost { name, kind, params: 0, flops: n as u64, spatial });
    }
}

impl Unet {
    fn block_names(&self) -> Vec<(String, usize, usize)> {
        // (name, cin, cout) for every block in forward order
        let d = self.cfg.depth;
        let mut v = Vec::new();
        for i in 0..d {
            let cin = if i == 0 { self.in_ch } else { self.cfg.channels(i - 1) };
            v.push((format!("{}.enc{i}", self.prefix), cin, self.cfg.channels(i)));
        }
        v.push((format!("{}.mid", self.prefix), self.cfg.channels(d - 1), self.cfg.channels(d)));
        for i in (0..d).rev() {
            v.push((format!("{}.dec{i}", self.prefix), 2 * self.cfg.channels(i), self.cfg.channels(i)));
        }
        v
    }

    /// Registers every parameter with He-uniform weights and zero biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let mut conv = |store: &mut ParamStore, name: String, cin: usize, cout: usize| -> Result<()> {
            store.insert(format!("{name}.w"), he_uniform([cout, cin, 3, 3], cin * 9, rng))?;
            store.insert(format!("{name}.b"), Tensor::zeros([cout]))
        };
        let d = self.cfg.depth;
        let blocks = self.block_names();
        let mut fcs = Vec::new();
        // encoder + bottleneck blocks
        for (name, cin, cout) in &blocks[..=d] {
            conv(store, format!("{name}.conv1"), *cin, *cout)?;
            conv(store, format!("{name}.conv2"), *cout, *cout)?;
            if self.cfg.attention_enabled {
                fcs.push((format!("{name}.ca.fc1"), *cout, attention_hidden(*cout)));
                fcs.push((format!("{name}.ca.fc2"), attention_hidden(*cout), *cout));
            }
        }
        for (k, i) in (0..d).rev().enumerate() {
            conv(store, format!("{}.up{i}", self.prefix), self.cfg.channels(i + 1), self.cfg.channels(i))?;
            let (name, cin, cout) = &blocks[d + 1 + k];
            conv(store, format!("{name}.conv1"), *cin, *cout)?;
            conv(store, format!("{name}.conv2"), *cout, *cout)?;
            if self.cfg.attention_enabled {
                fcs.push((format!("{name}.ca.fc1"), *cout, attention_hidden(*cout)));
                fcs.push((format!("{name}.ca.fc2"), attention_hidden(*cout), *cout));
            }
        }
        conv(store, format!("{}.head", self.prefix), self.cfg.channels(0), self.out_ch)?;
        if self.hist_branch {
            fcs.push((format!("{}.hist.fc1", self.prefix), HIST_BINS, HIST_HIDDEN));
            fcs.push((format!("{}.hist.fc2", self.prefix), HIST_HIDDEN, self.cfg.bottleneck_channels()));
        }
        for (name, fin, fout) in fcs {
            store.insert(format!("{name}.w"), he_uniform([fout, fin], fin, rng))?;
            store.insert(format!("{name}.b"), Tensor::zeros([fout]))?;
        }
        Ok(())
    }

    fn conv(&self, tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), 1, 1)
    }

    fn fc(&self, tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        tape.linear(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?))
    }

    /// Global pooling -> FC -> ReLU -> FC -> sigmoid -> per-channel scaling.
    pub fn channel_attention(&self, tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let g = tape.global_avg_pool(x)?;
        let h = tape.relu(self.fc(tape, p, &format!("{name}.fc1"), g)?);
        let w = tape.sigmoid(self.fc(tape, p, &format!("{name}.fc2"), h)?);
        tape.scale_channels(x, w)
    }

    fn block(&self, tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let x = tape.prelu(self.conv(tape, p, &format!("{name}.conv1"), x)?);
        let x = tape.prelu(self.conv(tape, p, &format!("{name}.conv2"), x)?);
        if self.cfg.attention_enabled {
            self.channel_attention(tape, p, &format!("{name}.ca"), x)
        } else {
            Ok(x)
        }
    }

    /// Runs the backbone up to the head conv (no output activation).
    /// `hist` is the `(N, 256)` histogram input when the branch is present.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var, hist: Option<Var>) -> Result<Var> {
        let d = self.cfg.depth;
        let mut skips = Vec::with_capacity(d);
        let mut h = x;
        for i in 0..d {
            let s = self.block(tape, p, &format!("{}.enc{i}", self.prefix), h)?;
            skips.push(s);
            h = tape.max_pool2(s)?;
        }
        h = self.block(tape, p, &format!("{}.mid", self.prefix), h)?;
        if self.hist_branch {
            let hv = hist.ok_or_else(|| {
                crate::Error::State("histogram branch enabled but no histogram given".into())
            })?;
            let a = tape.relu(self.fc(tape, p, &format!("{}.hist.fc1", self.prefix), hv)?);
            let a = tape.relu(self.fc(tape, p, &format!("{}.hist.fc2", self.prefix), a)?);
            h = tape.add_spatial(h, a)?;
        }
        for i in (0..d).rev() {
            let up = tape.upsample2(h)?;
            let up = tape.prelu(self.conv(tape, p, &format!("{}.up{i}", self.prefix), up)?);
            let cat = tape.concat(skips[i], up)?;
            h = self.block(tape, p, &format!("{}.dec{i}", self.prefix), cat)?;
        }
        self.conv(tape, p, &format!("{}.head", self.prefix), h)
    }

    /// Per-layer parameter and FLOP table for one `width x height` image.
    pub fn costs(&self, width: usize, height: usize) -> Vec<LayerCost> {
        let d = self.cfg.depth;
        let mut c = Costs { rows: Vec::new() };
        let area = |level: usize| (width >> level) * (height >> level);
        let blocks = self.block_names();
        let block = |c: &mut Costs, name: &str, cin: usize, cout: usize, hw: usize| {
            c.conv(format!("{name}.conv1"), cin, cout, hw);
            c.elem(format!("{name}.prelu1"), "prelu", cout * hw, true);
            c.conv(format!("{name}.conv2"), cout, cout, hw);
            c.elem(format!("{name}.prelu2"), "prelu", cout * hw, true);
            if self.cfg.attention_enabled {
                let r = attention_hidden(cout);
                c.elem(format!("{name}.ca.pool"), "global_avg_pool", cout * hw, true);
                c.fc(format!("{name}.ca.fc1"), cout, r);
                c.elem(format!("{name}.ca.relu"), "relu", r, false);
                c.fc(format!("{name}.ca.fc2"), r, cout);
                c.elem(format!("{name}.ca.sigmoid"), "sigmoid", cout, false);
                c.elem(format!("{name}.ca.scale"), "scale", cout * hw, true);
            }
        };
        for (i, (name, cin, cout)) in blocks[..d].iter().enumerate() {
            block(&mut c, name, *cin, *cout, area(i));
            c.elem(format!("{}.pool{i}", self.prefix), "max_pool2", cout * area(i), true);
        }
        let (name, cin, cout) = &blocks[d];
        block(&mut c, name, *cin, *cout, area(d));
        if self.hist_branch {
            let cb = self.cfg.bottleneck_channels();
            c.fc(format!("{}.hist.fc1", self.prefix), HIST_BINS, HIST_HIDDEN);
            c.elem(format!("{}.hist.relu1", self.prefix), "relu", HIST_HIDDEN, false);
            c.fc(format!("{}.hist.fc2", self.prefix), HIST_HIDDEN, cb);
            c.elem(format!("{}.hist.relu2", self.prefix), "relu", cb, false);
            c.elem(format!("{}.hist.add", self.prefix), "add", cb * area(d), true);
        }
        for (k, i) in (0..d).rev().enumerate() {
            let (ci, cu) = (self.cfg.channels(i), self.cfg.channels(i + 1));
            c.elem(format!("{}.upsample{i}", self.prefix), "upsample2", cu * area(i), true);
            c.conv(format!("{}.up{i}", self.prefix), cu, ci, area(i));
            c.elem(format!("{}.up{i}.prelu", self.prefix), "prelu", ci * area(i), true);
            c.elem(format!("{}.concat{i}", self.prefix), "concat", 0, true);
            let (name, cin, cout) = &blocks[d + 1 + k];
            block(&mut c, name, *cin, *cout, area(i));
        }
        c.conv(format!("{}.head", self.prefix), self.cfg.channels(0), self.out_ch, area(0));
        c.rows
    }
}
