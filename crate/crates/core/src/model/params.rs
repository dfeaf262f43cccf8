//! Named parameter storage: one flat f64 vector plus a layout describing
//! the named slices inside it. The flat form makes optimizer state and
//! gradient accumulation trivial; the layout order is fixed by construction
//! so serialization and gradient vectors are deterministic.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Arc<ParamLayout> {
        let v = cfg.vocab_size as usize;
        let d = cfg.d_model;
        let ff = cfg.d_ff;
        let mut b = LayoutBuilder::default();

        b.add("embed.tok", vec![v, d]);
        b.add("embed.pos_enc", vec![cfg.max_enc_len, d]);
        b.add("embed.pos_dec", vec![cfg.max_dec_len, d]);

        for i in 0..cfg.num_enc_layers {
            b.add_ln(&format!("enc.{i}.ln1"), d);
            b.add_attn(&format!("enc.{i}.attn"), d);
            b.add_ln(&format!("enc.{i}.ln2"), d);
            b.add_ffn(&format!("enc.{i}.ffn"), d, ff);
        }
        b.add_ln("enc.final_ln", d);

        for i in 0..cfg.num_dec_layers {
            b.add_ln(&format!("dec.{i}.ln1"), d);
            b.add_attn(&format!("dec.{i}.self_attn"), d);
            b.add_ln(&format!("dec.{i}.ln2"), d);
            b.add_attn(&format!("dec.{i}.cross_attn"), d);
            b.add_ln(&format!("dec.{i}.ln3"), d);
            b.add_ffn(&format!("dec.{i}.ffn"), d, ff);
        }
        b.add_ln("dec.final_ln", d);

        if !cfg.tie_output_embedding {
            b.add("out.w", vec![d, v]);
            b.add("out.b", vec![v]);
        }
        Arc::new(b.finish())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        &self.entries[self.index[name]]
    }
}

#[derive(Default)]
struct LayoutBuilder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: &str, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            offset: self.total,
        });
        self.total += len;
    }

    fn add_ln(&mut self, prefix: &str, d: usize) {
        self.add(&format!("{prefix}.g"), vec![d]);
        self.add(&format!("{prefix}.b"), vec![d]);
    }

    fn add_attn(&mut self, prefix: &str, d: usize) {
        for w in ["wq", "wk", "wv", "wo"] {
            self.add(&format!("{prefix}.{w}"), vec![d, d]);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            self.add(&format!("{prefix}.{bias}"), vec![d]);
        }
    }

    fn add_ffn(&mut self, prefix: &str, d: usize, ff: usize) {
        self.add(&format!("{prefix}.w1"), vec![d, ff]);
        self.add(&format!("{prefix}.b1"), vec![ff]);
        self.add(&format!("{prefix}.w2"), vec![ff, d]);
        self.add(&format!("{prefix}.b2"), vec![d]);
    }

    fn finish(self) -> ParamLayout {
        let index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        ParamLayout {
            entries: self.entries,
            index,
            total: self.total,
        }
    }
}

/// The full parameter set θ as one flat vector.
#[derive(Debug, Clone)]
pub struct Parameters {
    layout: Arc<ParamLayout>,
    pub values: Vec<f64>,
}

impl Parameters {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Parameters {
        let layout = ParamLayout::for_config(cfg);
        let mut values = vec![0.0; layout.total_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in layout.entries() {
            let slice = &mut values[entry.offset..entry.offset + entry.shape.iter().product::<usize>()];
            init_entry(&entry.name, &entry.shape, slice, &mut rng);
        }
        Parameters { layout, values }
    }

    pub fn from_flat(layout: Arc<ParamLayout>, values: Vec<f64>) -> Parameters {
        assert_eq!(values.len(), layout.total_len());
        Parameters { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let e = self.layout.entry(name);
        let len: usize = e.shape.iter().product();
        (&e.shape, &self.values[e.offset..e.offset + len])
    }

    /// Max |a - b| against another parameter vector of the same layout.
    pub fn max_abs_diff(&self, other: &Parameters) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn init_entry(name: &str, shape: &[usize], out: &mut [f64], rng: &mut ChaCha8Rng) {
    if name.ends_with(".g") {
        out.fill(1.0); // layer-norm gains
    } else if name.ends_with(".b")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
    {
        out.fill(0.0);
    } else if name.starts_with("embed.") {
        let normal = Normal::new(0.0, 0.05).unwrap();
        for v in out.iter_mut() {
            *v = normal.sample(rng);
        }
    } else {
        // Xavier-normal for projection matrices.
        let (fan_in, fan_out) = (shape[0] as f64, shape[1] as f64);
        let std = (2.0 / (fan_in + fan_out)).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        for v in out.iter_mut() {
            *v = normal.sample(rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_deterministic_and_seeded_init_reproduces() {
        let cfg = ModelConfig::default();
        let a = Parameters::init(&cfg, 7);
        let b = Parameters::init(&cfg, 7);
        assert_eq!(a.values, b.values);
        let c = Parameters::init(&cfg, 8);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn tied_config_has_no_output_projection() {
        let cfg = ModelConfig::default();
        let layout = ParamLayout::for_config(&cfg);
        assert!(!layout.entries().iter().any(|e| e.name == "out.w"));
        let untied = ModelConfig {
            tie_output_embedding: false,
            ..cfg
        };
        let layout = ParamLayout::for_config(&untied);
        assert!(layout.entries().iter().any(|e| e.name == "out.w"));
    }

    #[test]
    fn gains_init_to_one() {
        let cfg = ModelConfig::default();
        let p = Parameters::init(&cfg, 1);
        let (_, g) = p.get("enc.0.ln1.g");
        assert!(g.iter().all(|&v| v == 1.0));
        let (_, b) = p.get("enc.0.ln1.b");
        assert!(b.iter().all(|&v| v == 0.0));
    }
}
