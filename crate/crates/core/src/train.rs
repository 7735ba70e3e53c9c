//! Per-clip objectives, gradients, and optimizer steps.

use alloc::vec::Vec;

use crate::degrade::isp::IspParams;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{clip_loss, ClipObjective, LossBreakdown, Perceptual};
use crate::motion::SyntheticClip;
use crate::net::Network;
use crate::optim::{Adam, CosineSchedule};
use crate::params::{ParamGrads, ParamStore};

/// Training stage: reconstruction-only pretraining, then the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Pretrain,
    Full,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Stage::Pretrain),
            "full" => Some(Stage::Full),
            _ => None,
        }
    }
}

/// Loss breakdown and parameter gradients of one clip.
pub fn clip_gradients(
    net: &Network,
    store: &ParamStore,
    phi: &dyn Perceptual,
    isp: &IspParams,
    objective: &ClipObjective,
    clip: &SyntheticClip,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut g = Graph::new();
    let restored = net.run_clip_graph(&mut g, store, &clip.raw)?;
    let (total, breakdown) = clip_loss(&mut g, objective, phi, isp, &restored, clip)?;
    let grads = g.backward(total)?;
    let mut out = store.zero_grads();
    grads.accumulate_params(&g, &mut out);
    if !out.is_finite() {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    Ok((breakdown, out))
}

/// Record of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Batch mean of every loss component.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// Mean of per-clip gradients, then one Adam step at the scheduled rate.
pub struct Trainer<'a> {
    pub net: &'a Network,
    pub store: &'a mut ParamStore,
    pub adam: &'a mut Adam,
    pub schedule: CosineSchedule,
    pub objective: ClipObjective,
    pub phi: &'a dyn Perceptual,
    pub isp: IspParams,
}

impl Trainer<'_> {
    pub fn step(&mut self, step: usize, batch: &[SyntheticClip]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut sum = self.store.zero_grads();
        let mut parts: Vec<LossBreakdown> = Vec::with_capacity(batch.len());
        for clip in batch {
            let (b, g) = clip_gradients(
                self.net,
                self.store,
                self.phi,
                &self.isp,
                &self.objective,
                clip,
            )?;
            sum.add(&g);
            parts.push(b);
        }
        let k = 1.0 / batch.len() as f64;
        sum.scale(k);
        let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() * k;
        let loss = LossBreakdown {
            r: mean(|b| b.r),
            p: mean(|b| b.p),
            dtc: mean(|b| b.dtc),
            dtc_long: mean(|b| b.dtc_long),
            rpc: mean(|b| b.rpc),
            total: mean(|b| b.total),
        };
        let lr = self.schedule.lr(step);
        self.adam.step(self.store, &sum, lr)?;
        Ok(StepLog {
            step,
            lr,
            loss,
            grad_norm: sum.norm(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{BayerPattern, NoiseParams};
    use crate::losses::{ConvFeatures, LossWeights};
    use crate::motion::{synth_clip, FlowSynthParams};
    use crate::net::{HiddenMode, NetConfig};
    use crate::rng::stream;
    use crate::scene;

    fn toy() -> NetConfig {
        NetConfig {
            feat_channels: 4,
            hidden_channels: 4,
            max_channels: 8,
            buffer: 3,
            f_max: 2,
            hidden_mode: HiddenMode::Recurrent,
            align_hidden: false,
        }
    }

    #[test]
    fn gradients_reach_network_and_steps_reduce_loss() {
        let mut rng = stream(1, "data");
        let x = scene::natural_scene(32, 32, &mut rng);
        let clip = synth_clip(
            &x,
            3,
            NoiseParams::LOW,
            &FlowSynthParams::default(),
            BayerPattern::Rggb,
            &mut rng,
        )
        .unwrap();
        let mut store = ParamStore::new();
        let net = Network::new(toy(), &mut store, &mut stream(1, "init")).unwrap();
        let phi = ConvFeatures::default();
        let objective = ClipObjective {
            weights: LossWeights::FULL,
            long_gap: 2,
            ..ClipObjective::default()
        };
        let (b, g) =
            clip_gradients(&net, &store, &phi, &IspParams::default(), &objective, &clip).unwrap();
        assert!(b.dtc_long > 0.0);
        for id in store.ids() {
            let name = store.name(id);
            if name.starts_with("extract")
                || name.starts_with("rcm.entry")
                || name.starts_with("to_rgb")
            {
                assert!(g.get(id).max_abs() > 0.0, "{name}");
            }
        }
        let mut adam = Adam::new(&store);
        let mut trainer = Trainer {
            net: &net,
            store: &mut store,
            adam: &mut adam,
            schedule: CosineSchedule::new(1e-3, 1e-5, 20).unwrap(),
            objective: ClipObjective {
                weights: LossWeights::RECONSTRUCTION,
                ..objective
            },
            phi: &phi,
            isp: IspParams::default(),
        };
        let first = trainer.step(0, core::slice::from_ref(&clip)).unwrap();
        let mut last = first;
        for s in 1..20 {
            last = trainer.step(s, core::slice::from_ref(&clip)).unwrap();
        }
        assert!(last.loss.r < first.loss.r);
        assert!(trainer.step(0, &[]).is_err());
    }
}
