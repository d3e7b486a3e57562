//! Learnable weights, generic over their storage.
//!
//! The same layout holds owned tensors ([`ModelParams`]) and the graph
//! handles they are bound to for one step ([`BoundParams`]). The CNN weights
//! exist once and serve both Siamese branches.

use super::config::{ModelConfig, SECOND_KERNEL};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

macro_rules! weight_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn collect_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $(out.push((format!("{prefix}.{}", stringify!($field)), &self.$field));)*
            }

            fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)*
            }

            fn map_with<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }
        }
    };
}

weight_group!(
    /// Two stacked convolutions: `[D, C, k]` then `[D, D, 8]`, each with a `[D, 1]` bias.
    ConvPath {
        conv1_weight,
        conv1_bias,
        conv2_weight,
        conv2_bias,
    }
);

weight_group!(
    /// One attention + feed-forward block with post-norm residuals.
    EncoderWeights {
        query,
        key,
        value,
        output,
        norm1_gain,
        norm1_bias,
        ffn_in,
        ffn_out,
        norm2_gain,
        norm2_bias,
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct SstWeights<T> {
    /// Kernel `4 fs` path.
    pub long: ConvPath<T>,
    /// Kernel `fs / 2` path.
    pub short: ConvPath<T>,
    /// `[1, 1, D]`
    pub class_token: T,
    /// Cross-attention blocks between the two branches.
    pub ete: Vec<EncoderWeights<T>>,
    /// Self-attention blocks across the epochs of a sequence.
    pub se: Vec<EncoderWeights<T>>,
    /// `[D, n_classes]`
    pub head: T,
}

pub type ModelParams = SstWeights<Tensor>;
pub type BoundParams = SstWeights<Var>;

impl<T> SstWeights<T> {
    /// Every weight with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.long.collect_named("cnn.long", &mut out);
        self.short.collect_named("cnn.short", &mut out);
        out.push(("class_token".to_string(), &self.class_token));
        for (i, e) in self.ete.iter().enumerate() {
            e.collect_named(&format!("ete.{i}"), &mut out);
        }
        for (i, e) in self.se.iter().enumerate() {
            e.collect_named(&format!("se.{i}"), &mut out);
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable access in the same order as [`SstWeights::named`].
    pub fn all_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.long.collect_mut(&mut out);
        self.short.collect_mut(&mut out);
        out.push(&mut self.class_token);
        for e in &mut self.ete {
            e.collect_mut(&mut out);
        }
        for e in &mut self.se {
            e.collect_mut(&mut out);
        }
        out.push(&mut self.head);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SstWeights<U> {
        SstWeights {
            long: self.long.map_with(&mut f),
            short: self.short.map_with(&mut f),
            class_token: f(&self.class_token),
            ete: self.ete.iter().map(|e| e.map_with(&mut f)).collect(),
            se: self.se.iter().map(|e| e.map_with(&mut f)).collect(),
            head: f(&self.head),
        }
    }
}

/// Expected `(name, shape)` list for a config, in [`SstWeights::named`] order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    shape_template(cfg).named().into_iter().map(|(n, s)| (n, s.clone())).collect()
}

fn shape_template(cfg: &ModelConfig) -> SstWeights<Vec<usize>> {
    let d = cfg.dim;
    let [long, short] = cfg.paths();
    let path = |kernel: usize| ConvPath {
        conv1_weight: vec![d, cfg.channels, kernel],
        conv1_bias: vec![d, 1],
        conv2_weight: vec![d, d, SECOND_KERNEL],
        conv2_bias: vec![d, 1],
    };
    let encoder = || EncoderWeights {
        query: vec![d, d],
        key: vec![d, d],
        value: vec![d, d],
        output: vec![d, d],
        norm1_gain: vec![d],
        norm1_bias: vec![d],
        ffn_in: vec![d, cfg.ffn_dim],
        ffn_out: vec![cfg.ffn_dim, d],
        norm2_gain: vec![d],
        norm2_bias: vec![d],
    };
    SstWeights {
        long: path(long.kernel),
        short: path(short.kernel),
        class_token: vec![1, 1, d],
        ete: (0..cfg.depth).map(|_| encoder()).collect(),
        se: (0..cfg.depth).map(|_| encoder()).collect(),
        head: vec![d, cfg.n_classes],
    }
}

/// Number of scalar weights for a config.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    parameter_shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

impl ModelParams {
    /// Uniform `+-1/sqrt(fan_in)` for weights and biases, class token from
    /// `N(0, 0.02)`, layer norms at gain 1 / bias 0.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let template = shape_template(cfg);
        let names: Vec<String> = template.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        template.map(|shape| {
            let name = &names[i];
            i += 1;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("_gain") {
                vec![1.0; n]
            } else if name.ends_with("norm1_bias") || name.ends_with("norm2_bias") {
                vec![0.0; n]
            } else if name == "class_token" {
                let normal = Normal::new(0.0, 0.02).expect("valid normal");
                (0..n).map(|_| normal.sample(rng)).collect()
            } else {
                let fan_in = fan_in(name, shape, cfg);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let uni = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                (0..n).map(|_| uni.sample(rng)).collect()
            };
            Tensor::new(shape.clone(), data).expect("template shapes are valid").with_grad()
        })
    }

    /// Assembles weights from tensors listed in [`SstWeights::named`] order.
    pub fn from_ordered(cfg: &ModelConfig, tensors: Vec<Tensor>) -> Self {
        let mut it = tensors.into_iter();
        shape_template(cfg).map(|_| it.next().expect("one tensor per parameter"))
    }

    /// Binds every weight as a differentiated leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.map(|t| g.param(t))
    }

    /// Binds every weight as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        self.map(|t| g.constant(t))
    }

    pub fn zero_grad(&mut self) {
        self.all_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients computed on `g` into each weight.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) {
        let vars: Vec<Var> = bound.named().into_iter().map(|(_, v)| *v).collect();
        for (t, v) in self.all_mut().into_iter().zip(vars) {
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad),
                None => t.accumulate_grad(&vec![0.0; t.len()]),
            }
        }
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn fan_in(name: &str, shape: &[usize], cfg: &ModelConfig) -> usize {
    if name.ends_with("conv1_weight") || name.ends_with("conv2_weight") {
        shape[1] * shape[2]
    } else if name.ends_with("conv1_bias") {
        let kernel = if name.starts_with("cnn.long") { cfg.paths()[0].kernel } else { cfg.paths()[1].kernel };
        cfg.channels * kernel
    } else if name.ends_with("conv2_bias") {
        cfg.dim * SECOND_KERNEL
    } else {
        shape[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_is_a_function_of_config() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.count(), b.count());
        assert_eq!(a.count(), parameter_count(&cfg));
        assert_ne!(a, b);
        for ((na, ta), (ns, s)) in a.named().into_iter().zip(parameter_shapes(&cfg)) {
            assert_eq!(na, ns);
            assert_eq!(ta.shape(), s.as_slice());
        }
    }

    #[test]
    fn one_cnn_per_path_serves_both_branches() {
        let cfg = ModelConfig::default();
        let names: Vec<String> = parameter_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("cnn.")).count(), 8);
        assert_eq!(names.iter().filter(|n| n.starts_with("ete.")).count(), 10 * cfg.depth);
    }

    #[test]
    fn init_ranges() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        assert!(p.ete[0].query.data().iter().all(|v| v.abs() <= bound));
        assert!(p.ete[0].norm1_gain.data().iter().all(|&v| v == 1.0));
        assert!(p.se[0].norm2_bias.data().iter().all(|&v| v == 0.0));
        assert!(p.class_token.data().iter().all(|v| v.abs() < 0.2));
    }
}
