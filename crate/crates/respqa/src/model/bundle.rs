//! The full parameter bundle: frozen backbones, trainable adapters,
//! aligners, routers, plus dataflow instrumentation and the parameter
//! registry used by the optimizer and checkpointing.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::path::Path;

use crate::nn::checkpoint::{self, CheckpointError};
use crate::nn::{Aligner, AudioExpertBank, FrozenCausalLm, LoraBank, ModelConfig};
use crate::rng::substream;
use crate::routing::{AudioRoutingProxy, LanguageRoutingInput, RouterHead, RoutingConfig};
use crate::tensor::Tensor;

/// Ordered dataflow trace of one example, used to assert the single-path
/// and staged-conditioning invariants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    ExampleStart(String),
    ProxyComputed,
    AudioRouted { expert: usize },
    ExpertEncode { expert: usize },
    Aligned,
    LangInputComputed,
    LangRouted { adapter: usize },
    LmForward { adapter: usize },
    ExampleEnd,
}

#[derive(Default)]
pub struct Instrumentation {
    enabled: Cell<bool>,
    events: RefCell<Vec<TraceEvent>>,
}

impl Instrumentation {
    pub fn set_enabled(&self, on: bool) {
        self.enabled.set(on);
    }

    pub fn record(&self, e: TraceEvent) {
        if self.enabled.get() {
            self.events.borrow_mut().push(e);
        }
    }

    pub fn take(&self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.events.borrow_mut())
    }
}

pub struct ModelBundle {
    pub model_cfg: ModelConfig,
    pub routing_cfg: RoutingConfig,
    pub master_seed: u64,
    pub lm: FrozenCausalLm,
    pub lora: LoraBank,
    pub audio: AudioExpertBank,
    /// One aligner per audio expert.
    pub aligners: Vec<Aligner>,
    pub audio_proxy: AudioRoutingProxy,
    pub lang_input: LanguageRoutingInput,
    pub audio_router: RouterHead,
    pub lang_router: RouterHead,
    pub trace: Instrumentation,
    /// Examples routed since construction; feeds the balanced warmup cycle.
    pub routing_step: Cell<u64>,
}

impl ModelBundle {
    /// Build all parameters from the init substream of `master_seed`.
    /// Initialization order is fixed; identical (config, seed) pairs yield
    /// bit-identical bundles.
    pub fn new(model_cfg: ModelConfig, routing_cfg: RoutingConfig, master_seed: u64) -> Self {
        let mut rng = substream(master_seed, "init");
        let lm = FrozenCausalLm::new(&mut rng, &model_cfg);
        let lora = LoraBank::new(&mut rng, &model_cfg);
        let audio = AudioExpertBank::new(&mut rng, &model_cfg);
        let aligners = audio
            .experts
            .iter()
            .map(|e| Aligner::new(&mut rng, e.d_e(), model_cfg.d_model))
            .collect();
        let audio_proxy = AudioRoutingProxy::new(
            &mut rng,
            model_cfg.mel_bins,
            model_cfg.frames,
            model_cfg.proxy_channels,
            model_cfg.d_model,
            model_cfg.d_router,
        );
        let lang_input = LanguageRoutingInput::new(&mut rng, model_cfg.d_model, model_cfg.d_router);
        let audio_router = RouterHead::new(&mut rng, model_cfg.d_router, 32, audio.n_experts());
        let lang_router = RouterHead::new(&mut rng, model_cfg.d_model, 32, model_cfg.n_adapters);
        ModelBundle {
            model_cfg,
            routing_cfg,
            master_seed,
            lm,
            lora,
            audio,
            aligners,
            audio_proxy,
            lang_input,
            audio_router,
            lang_router,
            trace: Instrumentation::default(),
            routing_step: Cell::new(0),
        }
    }

    /// Every parameter in registry order. Frozen/trainable is carried by
    /// each tensor's `requires_grad` flag.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.lm.params(&mut out);
        self.lora.params(&mut out);
        self.audio.params(&mut out);
        for (i, a) in self.aligners.iter().enumerate() {
            a.params(&format!("aligner{i}"), &mut out);
        }
        self.audio_proxy.params("router.audio.proxy", &mut out);
        self.lang_input.params("router.lang.input", &mut out);
        self.audio_router.params("router.audio.head", &mut out);
        self.lang_router.params("router.lang.head", &mut out);
        out
    }

    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.parameters().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    /// FNV-1a hash over the frozen parameter bytes, for the
    /// frozen-invariance checks.
    pub fn frozen_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.parameters().iter().filter(|(_, t)| !t.requires_grad()) {
            for v in t.data().iter() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Deep copy: rebuild the skeleton from (config, seed), then overwrite
    /// every tensor with this bundle's current values.
    pub fn deep_clone(&self) -> ModelBundle {
        let fresh = ModelBundle::new(
            self.model_cfg.clone(),
            self.routing_cfg.clone(),
            self.master_seed,
        );
        let src = self.parameters();
        let dst = fresh.parameters();
        assert_eq!(src.len(), dst.len());
        for ((sn, st), (dn, dt)) in src.iter().zip(&dst) {
            assert_eq!(sn, dn, "parameter registry order changed");
            dt.set_data(st.to_vec());
        }
        fresh.routing_step.set(self.routing_step.get());
        fresh
    }

    pub fn next_routing_step(&self) -> u64 {
        let s = self.routing_step.get();
        self.routing_step.set(s + 1);
        s
    }

    pub fn save_checkpoint(
        &self,
        dir: &Path,
        meta: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), CheckpointError> {
        checkpoint::save(dir, &self.parameters(), meta)
    }

    /// Restore parameter values from a checkpoint directory into this bundle.
    pub fn load_checkpoint(&self, dir: &Path) -> Result<checkpoint::Manifest, CheckpointError> {
        let (manifest, buffers) = checkpoint::load(dir)?;
        checkpoint::restore(&self.parameters(), &manifest, &buffers)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    #[test]
    fn registry_is_deterministic_and_split_by_frozenness() {
        let b = ModelBundle::new(ModelConfig::tiny(), RoutingConfig::default(), 5);
        let params = b.parameters();
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let b2 = ModelBundle::new(ModelConfig::tiny(), RoutingConfig::default(), 5);
        let names2: Vec<String> = b2.parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names2.iter().map(|s| s.as_str()).collect::<Vec<_>>());
        let trainable = b.trainable_parameters().len();
        assert!(trainable > 0 && trainable < params.len());
        // Frozen set includes the LM backbone and expert bases.
        assert!(params.iter().any(|(n, t)| n == "lm.embed" && !t.requires_grad()));
        assert!(params.iter().any(|(n, t)| n.starts_with("lora.") && t.requires_grad()));
    }

    #[test]
    fn deep_clone_copies_values() {
        let b = ModelBundle::new(ModelConfig::tiny(), RoutingConfig::default(), 5);
        let (_, t) = &b.trainable_parameters()[0];
        t.map_data(|d| d[0] = 42.0);
        let c = b.deep_clone();
        assert_eq!(c.trainable_parameters()[0].1.data()[0], 42.0);
        assert_eq!(b.frozen_hash(), c.frozen_hash());
    }

    #[test]
    fn checkpoint_roundtrip_through_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let b = ModelBundle::new(ModelConfig::tiny(), RoutingConfig::default(), 5);
        b.trainable_parameters()[3].1.map_data(|d| {
            for (i, v) in d.iter_mut().enumerate() {
                *v = i as f64 * 0.25;
            }
        });
        b.save_checkpoint(dir.path(), BTreeMap::new()).unwrap();
        let fresh = ModelBundle::new(ModelConfig::tiny(), RoutingConfig::default(), 6);
        fresh.load_checkpoint(dir.path()).unwrap();
        let a = b.parameters();
        let c = fresh.parameters();
        for ((_, x), (_, y)) in a.iter().zip(&c) {
            let xv = x.to_vec();
            let yv = y.to_vec();
            assert_eq!(xv.len(), yv.len());
            for (p, q) in xv.iter().zip(&yv) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
