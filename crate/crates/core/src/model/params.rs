//! Flat parameter buffer for the backbone and its named tensor layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};

use super::BackboneConfig;
use crate::error::Result;
use crate::numerics::{random_normal, seeded_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &p[self.range()]).unwrap()
    }

    pub fn vec<'a>(&self, p: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.range()])
    }

    pub fn mat_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut p[self.range()]).unwrap()
    }

    pub fn vec_mut<'a>(&self, p: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.range()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub qkv_w: Slot,
    pub qkv_b: Slot,
    pub proj_w: Slot,
    pub proj_b: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub fc1_w: Slot,
    pub fc1_b: Slot,
    pub fc2_w: Slot,
    pub fc2_b: Slot,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub named: Vec<(String, Slot)>,
    pub total: usize,
}

struct Builder {
    offset: usize,
    named: Vec<(String, Slot)>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += rows * cols;
        self.named.push((name, s));
        s
    }
}

impl Layout {
    pub fn new(c: &BackboneConfig) -> Layout {
        let (m, f, v) = (c.hidden_width, c.ffn_width, c.vocab_size);
        let mut b = Builder {
            offset: 0,
            named: Vec::new(),
        };
        let tok_emb = b.slot("tok_emb".into(), v, m);
        let pos_emb = b.slot("pos_emb".into(), c.max_sequence_length, m);
        let blocks = (0..c.num_layers)
            .map(|l| BlockLayout {
                ln1_g: b.slot(format!("block{l}.ln1_g"), 1, m),
                ln1_b: b.slot(format!("block{l}.ln1_b"), 1, m),
                qkv_w: b.slot(format!("block{l}.qkv_w"), m, 3 * m),
                qkv_b: b.slot(format!("block{l}.qkv_b"), 1, 3 * m),
                proj_w: b.slot(format!("block{l}.proj_w"), m, m),
                proj_b: b.slot(format!("block{l}.proj_b"), 1, m),
                ln2_g: b.slot(format!("block{l}.ln2_g"), 1, m),
                ln2_b: b.slot(format!("block{l}.ln2_b"), 1, m),
                fc1_w: b.slot(format!("block{l}.fc1_w"), m, f),
                fc1_b: b.slot(format!("block{l}.fc1_b"), 1, f),
                fc2_w: b.slot(format!("block{l}.fc2_w"), f, m),
                fc2_b: b.slot(format!("block{l}.fc2_b"), 1, m),
            })
            .collect();
        let lnf_g = b.slot("lnf_g".into(), 1, m);
        let lnf_b = b.slot("lnf_b".into(), 1, m);
        let head_w = b.slot("head_w".into(), m, v);
        let head_b = b.slot("head_b".into(), 1, v);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: b.offset,
            named: b.named,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Backbone {
    pub fn new_random(config: BackboneConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seeded_rng(seed);
        let m = config.hidden_width as f64;
        let depth_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut fill = |slot: Slot, std: f64, params: &mut [f64]| {
            let w = random_normal(slot.rows, slot.cols, std, &mut rng);
            params[slot.range()].copy_from_slice(w.as_slice().unwrap());
        };
        fill(layout.tok_emb, 0.3, &mut params);
        fill(layout.pos_emb, 0.1, &mut params);
        for bl in &layout.blocks {
            fill(bl.qkv_w, 1.0 / m.sqrt(), &mut params);
            fill(bl.proj_w, depth_scale / m.sqrt(), &mut params);
            fill(bl.fc1_w, 1.0 / m.sqrt(), &mut params);
            fill(bl.fc2_w, depth_scale / (config.ffn_width as f64).sqrt(), &mut params);
            params[bl.ln1_g.range()].fill(1.0);
            params[bl.ln2_g.range()].fill(1.0);
        }
        params[layout.lnf_g.range()].fill(1.0);
        fill(layout.head_w, 1.0 / m.sqrt(), &mut params);
        Ok(Backbone { config, layout, params })
    }

    pub fn from_params(config: BackboneConfig, params: Vec<f64>) -> Result<Backbone> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(crate::error::DmeaError::Checkpoint(format!(
                "expected {} backbone parameters, found {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Backbone { config, layout, params })
    }
}
