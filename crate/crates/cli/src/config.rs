//! Run configuration: a flat key=value namespace covering every adaptation
//! and training knob, merged from an optional config file, repeated
//! `--set key=value` flags, and dedicated command-line flags (last wins).
//! The canonical serialization fixes one line per key in sorted order, and
//! its CRC32 is the config hash embedded in output artifacts.

use std::path::Path;

use sada_core::adapt::AdaptConfig;
use sada_core::error::{Error, Result};
use sada_core::train::TrainRecipe;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub adapt: AdaptConfig,
    pub recipe: TrainRecipe,
    pub classes: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            adapt: AdaptConfig::default(),
            recipe: TrainRecipe::default(),
            classes: sada_core::synth::NUM_CLASSES,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::contract(format!("config key '{key}': cannot parse '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::contract(format!("config key '{key}': expected bool, got '{other}'"))),
    }
}

fn parse_list_f32(key: &str, v: &str) -> Result<Vec<f32>> {
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f32, f32)> {
    let parts = parse_list_f32(key, v)?;
    if parts.len() != 2 {
        return Err(Error::contract(format!("config key '{key}': expected 'lo,hi', got '{v}'")));
    }
    Ok((parts[0], parts[1]))
}

fn fmt_list(values: &[f32]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Applies one assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "alpha" => self.adapt.alpha = parse_num(key, v)?,
            "psi" => self.adapt.psi = parse_num(key, v)?,
            "eta" => self.adapt.eta = parse_num(key, v)?,
            "iters" => self.adapt.n_iters = parse_num(key, v)?,
            "scales" => self.adapt.scales = parse_list_f32(key, v)?,
            "use_flip" => self.adapt.use_flip = parse_bool(key, v)?,
            "use_gray" => self.adapt.use_gray = parse_bool(key, v)?,
            "groups" => {
                self.adapt.adapt_groups = v.split(',').map(|s| s.trim().to_string()).collect()
            }
            "momentum_adapt" => self.adapt.momentum_adapt = parse_num(key, v)?,
            "loss_on_all_views" => self.adapt.loss_on_all_views = parse_bool(key, v)?,
            "epochs" => self.recipe.epochs = parse_num(key, v)?,
            "batch_size" => self.recipe.batch_size = parse_num(key, v)?,
            "base_lr" => self.recipe.base_lr = parse_num(key, v)?,
            "momentum" => self.recipe.momentum = parse_num(key, v)?,
            "weight_decay" => self.recipe.weight_decay = parse_num(key, v)?,
            "poly_power" => self.recipe.poly_power = parse_num(key, v)?,
            "crop_area" => self.recipe.crop_area = parse_pair(key, v)?,
            "aspect" => self.recipe.aspect = parse_pair(key, v)?,
            "out_size" => self.recipe.out_size = parse_num(key, v)?,
            "flip_p" => self.recipe.flip_p = parse_num(key, v)?,
            "jitter_p" => self.recipe.jitter_p = parse_num(key, v)?,
            "jitter_range" => self.recipe.jitter_range = parse_pair(key, v)?,
            "hue_range" => self.recipe.hue_range = parse_pair(key, v)?,
            "blur_p" => self.recipe.blur_p = parse_num(key, v)?,
            "blur_sigma" => self.recipe.blur_sigma = parse_pair(key, v)?,
            "gray_p" => self.recipe.gray_p = parse_num(key, v)?,
            "classes" => self.classes = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            other => return Err(Error::contract(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a UTF-8 `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::contract(format!("{}:{}: expected 'key = value'", path.display(), lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies repeated `--set key=value` assignments.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::contract(format!("--set '{s}': expected key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.adapt.validate()?;
        self.recipe.validate()?;
        if self.classes == 0 || self.classes > 255 {
            return Err(Error::contract(format!("classes must lie in [1,255], got {}", self.classes)));
        }
        Ok(())
    }

    /// One line per key, sorted; the definition of the config hash. Keys
    /// that cannot change results (like --jobs) are deliberately absent.
    pub fn canonical(&self) -> String {
        let a = &self.adapt;
        let r = &self.recipe;
        let mut lines = vec![
            format!("alpha = {}", a.alpha),
            format!("aspect = {},{}", r.aspect.0, r.aspect.1),
            format!("base_lr = {}", r.base_lr),
            format!("batch_size = {}", r.batch_size),
            format!("blur_p = {}", r.blur_p),
            format!("blur_sigma = {},{}", r.blur_sigma.0, r.blur_sigma.1),
            format!("classes = {}", self.classes),
            format!("crop_area = {},{}", r.crop_area.0, r.crop_area.1),
            format!("epochs = {}", r.epochs),
            format!("eta = {}", a.eta),
            format!("flip_p = {}", r.flip_p),
            format!("gray_p = {}", r.gray_p),
            format!("groups = {}", a.adapt_groups.join(",")),
            format!("hue_range = {},{}", r.hue_range.0, r.hue_range.1),
            format!("iters = {}", a.n_iters),
            format!("jitter_p = {}", r.jitter_p),
            format!("jitter_range = {},{}", r.jitter_range.0, r.jitter_range.1),
            format!("loss_on_all_views = {}", a.loss_on_all_views),
            format!("momentum = {}", r.momentum),
            format!("momentum_adapt = {}", a.momentum_adapt),
            format!("out_size = {}", r.out_size),
            format!("poly_power = {}", r.poly_power),
            format!("psi = {}", a.psi),
            format!("scales = {}", fmt_list(&a.scales)),
            format!("seed = {}", self.seed),
            format!("use_flip = {}", a.use_flip),
            format!("use_gray = {}", a.use_gray),
            format!("weight_decay = {}", r.weight_decay),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.canonical().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_canonical_key_is_settable() {
        let mut cfg = RunConfig::default();
        for line in RunConfig::default().canonical().lines() {
            let (key, value) = line.split_once(" = ").unwrap();
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(cfg, RunConfig::default(), "round-trip through canonical form");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("learning_rate", "0.1").is_err());
        assert!(cfg.apply_sets(&["nope=1".into()]).is_err());
        assert!(cfg.apply_sets(&["alpha 0.2".into()]).is_err());
    }

    #[test]
    fn file_parsing_handles_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# full line comment\nalpha = 0.3  # trailing\n\npsi=0.9\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.adapt.alpha, 0.3);
        assert_eq!(cfg.adapt.psi, 0.9);

        std::fs::write(&path, "alpha\n").unwrap();
        assert!(RunConfig::default().apply_file(&path).is_err());
        assert!(RunConfig::default().apply_file(&dir.path().join("absent.cfg")).is_err());
    }

    #[test]
    fn hash_tracks_only_meaningful_changes() {
        let base = RunConfig::default();
        let mut other = RunConfig::default();
        assert_eq!(base.hash(), other.hash());
        other.set("eta", "0.01").unwrap();
        assert_ne!(base.hash(), other.hash());
        other.set("eta", &base.adapt.eta.to_string()).unwrap();
        assert_eq!(base.hash(), other.hash());
    }

    #[test]
    fn typed_values_parse_and_bad_ones_do_not() {
        let mut cfg = RunConfig::default();
        cfg.set("scales", "0.5,1").unwrap();
        assert_eq!(cfg.adapt.scales, vec![0.5, 1.0]);
        cfg.set("groups", "head").unwrap();
        assert_eq!(cfg.adapt.adapt_groups, vec!["head".to_string()]);
        cfg.set("use_flip", "false").unwrap();
        assert!(!cfg.adapt.use_flip);
        cfg.set("crop_area", "0.25,1.0").unwrap();
        assert_eq!(cfg.recipe.crop_area, (0.25, 1.0));
        assert!(cfg.set("alpha", "lots").is_err());
        assert!(cfg.set("use_gray", "maybe").is_err());
        assert!(cfg.set("crop_area", "0.25").is_err());
        cfg.set("classes", "0").unwrap();
        assert!(cfg.validate().is_err());
    }
}
