//! Run configuration: one flat `key=value` map covering every stage. Every
//! key has a default; files and `--set` overrides may only name known keys.

use std::path::Path;

use anyhow::{Context, Result};
use pin_core::evalreport::EvalOptions;
use pin_core::kv::{join_list, KvMap};
use pin_core::phantom::PhantomConfig;
use pin_core::pinfer::{InferenceConfig, Rule};
use pin_core::pinnet::{NetworkConfig, TrainConfig};

pub fn defaults() -> KvMap {
    let mut kv = KvMap::new();
    kv.set("seed", 0);
    kv.set("threads", 0);

    let p = PhantomConfig::default();
    kv.set("dims", join_list(&p.dims));
    kv.set("spacing", p.spacing);
    kv.set("n_landmarks", p.n_landmarks);
    kv.set("translation_range", p.translation_range);
    kv.set("rotation_range_deg", p.rotation_range_deg);
    kv.set("scale_min", p.scale_min);
    kv.set("scale_max", p.scale_max);
    kv.set("noise_sigma", p.noise_sigma);

    kv.set("variance_threshold", 0.995);

    let n = NetworkConfig::default();
    kv.set("patch_size", n.input_side);
    kv.set("conv_channels", join_list(&n.conv_channels));
    kv.set("fc_widths", join_list(&n.fc_widths));
    kv.set("dropout_rate", n.dropout_rate);

    let t = TrainConfig::default();
    t.to_kv(&mut kv);

    let e = EvalOptions::default();
    kv.set("iterations_rule_a", e.iterations_a);
    kv.set("iterations_rule_bc", e.iterations_bc);
    kv.set("early_stop_epsilon", e.early_stop_epsilon);
    kv.set("n_random_inits_multi", e.n_random_inits_multi);
    kv.set("runtime_repeats", e.runtime_repeats);
    kv
}

/// Defaults, then the file (if any), then `key=value` overrides in order.
pub fn load(file: Option<&Path>, sets: &[String]) -> Result<KvMap> {
    let mut kv = defaults();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = KvMap::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        kv.overlay(&parsed).with_context(|| format!("config {}", path.display()))?;
    }
    for s in sets {
        let parsed = KvMap::parse(s).with_context(|| format!("--set {s}"))?;
        kv.overlay(&parsed).with_context(|| format!("--set {s}"))?;
    }
    Ok(kv)
}

pub fn seed(kv: &KvMap) -> Result<u64> {
    Ok(kv.get("seed")?)
}

pub fn threads(kv: &KvMap) -> Result<usize> {
    Ok(kv.get("threads")?)
}

pub fn phantom(kv: &KvMap) -> Result<PhantomConfig> {
    let dims: Vec<usize> = kv.get_list("dims")?;
    let dims: [usize; 3] = dims.try_into().map_err(|d: Vec<usize>| anyhow::anyhow!("dims needs 3 entries, got {}", d.len()))?;
    Ok(PhantomConfig {
        dims,
        spacing: kv.get("spacing")?,
        n_landmarks: kv.get("n_landmarks")?,
        translation_range: kv.get("translation_range")?,
        rotation_range_deg: kv.get("rotation_range_deg")?,
        scale_min: kv.get("scale_min")?,
        scale_max: kv.get("scale_max")?,
        noise_sigma: kv.get("noise_sigma")?,
        seed: seed(kv)?,
    })
}

pub fn network(kv: &KvMap, input_channels: usize, n_o: usize) -> Result<NetworkConfig> {
    Ok(NetworkConfig {
        input_side: kv.get("patch_size")?,
        input_channels,
        conv_channels: kv.get_list("conv_channels")?,
        fc_widths: kv.get_list("fc_widths")?,
        n_o,
        dropout_rate: kv.get("dropout_rate")?,
    })
}

pub fn train(kv: &KvMap) -> Result<TrainConfig> {
    Ok(TrainConfig::from_kv(kv)?)
}

pub fn eval_options(kv: &KvMap) -> Result<EvalOptions> {
    Ok(EvalOptions {
        iterations_a: kv.get("iterations_rule_a")?,
        iterations_bc: kv.get("iterations_rule_bc")?,
        early_stop_epsilon: kv.get("early_stop_epsilon")?,
        n_random_inits_multi: kv.get("n_random_inits_multi")?,
        seed: seed(kv)?,
        runtime_repeats: kv.get("runtime_repeats")?,
    })
}

pub fn inference(kv: &KvMap, rule: Rule) -> Result<InferenceConfig> {
    Ok(eval_options(kv)?.inference(rule))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_every_section() {
        let kv = defaults();
        assert_eq!(phantom(&kv).unwrap(), PhantomConfig::default());
        assert_eq!(train(&kv).unwrap(), TrainConfig::default());
        assert_eq!(network(&kv, 3, 3).unwrap(), NetworkConfig::default());
        assert_eq!(eval_options(&kv).unwrap(), EvalOptions::default());
        assert_eq!(inference(&kv, Rule::A).unwrap().iterations, 350);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, &["no_such_key=1".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("no_such_key"));
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let kv = load(None, &["alpha=0.25".into(), "dims=32,32,40".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, kv.to_string()).unwrap();
        assert_eq!(load(Some(&p), &[]).unwrap(), kv);
    }
}
