//! Flat `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{NetConfig, Variant};
use crate::scheduler::ScheduleConfig;
use crate::trainer::TrainConfig;

/// Parsed key/value pairs. Typed readers consume keys; [`Settings::finish`]
/// rejects whatever was never read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    entries: BTreeMap<String, (String, usize)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            if entries
                .insert(k.to_string(), (v.to_string(), i + 1))
                .is_some()
            {
                return Err(Error::config(format!(
                    "line {}: duplicate key {k:?}",
                    i + 1
                )));
            }
        }
        Ok(Settings { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("line {line}: cannot parse {key} = {v:?}"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::config(format!("line {line}: unknown key {k:?}"))),
        }
    }
}

pub fn schedule_from(s: &mut Settings, base: ScheduleConfig) -> Result<ScheduleConfig> {
    let steps = s.take_or("T", base.steps)?;
    let gamma = s.take_or("gamma", base.gamma)?;
    let p = s.take_or("p", base.p)?;
    let beta_t = s.take_or("beta_T", base.beta_t)?;
    let derived = ScheduleConfig::with_gamma(steps, gamma, p, beta_t);
    let beta_1 = s.take_or("beta_1", derived.beta_1)?;
    let c = ScheduleConfig { beta_1, ..derived };
    c.validate()?;
    Ok(c)
}

pub fn net_from(s: &mut Settings, base: NetConfig) -> Result<NetConfig> {
    let mut c = NetConfig {
        base_channels: s.take_or("base_channels", base.base_channels)?,
        depth: s.take_or("depth", base.depth)?,
        use_window_attention: s.take_or("use_window_attention", base.use_window_attention)?,
        window_size: s.take_or("window_size", base.window_size)?,
        heads: s.take_or("heads", base.heads)?,
        time_embed_dim: s.take_or("time_embed_dim", base.time_embed_dim)?,
    };
    if let Some(v) = s.take::<String>("variant")? {
        let v =
            Variant::parse(&v).ok_or_else(|| Error::config(format!("unknown variant {v:?}")))?;
        c = c.with_variant(v);
    }
    c.validate()?;
    Ok(c)
}

pub fn train_from(s: &mut Settings, base: TrainConfig, steps: usize) -> Result<TrainConfig> {
    let c = TrainConfig {
        lambda: s.take_or("lambda", base.lambda)?,
        steps,
        lr_max: s.take_or("lr_max", base.lr_max)?,
        warmup_steps: s.take_or("warmup_steps", base.warmup_steps)?,
        total_steps: s.take_or("total_steps", base.total_steps)?,
        batch_size: s.take_or("batch_size", base.batch_size)?,
        seed: s.take_or("seed", base.seed)?,
        beta1_opt: s.take_or("beta1_opt", base.beta1_opt)?,
        beta2_opt: s.take_or("beta2_opt", base.beta2_opt)?,
        f64_mode: s.take_or("f64_mode", base.f64_mode)?,
    };
    c.validate()?;
    Ok(c)
}

/// Everything the `train` command reads from its config file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::parse(text)?;
        let r = Self::take_from(&mut s, &RunConfig::default())?;
        s.finish()?;
        Ok(r)
    }

    pub fn take_from(s: &mut Settings, base: &RunConfig) -> Result<Self> {
        let schedule = schedule_from(s, base.schedule)?;
        let net = net_from(s, base.net)?;
        let train = train_from(s, base.train.clone(), schedule.steps)?;
        Ok(RunConfig {
            schedule,
            net,
            train,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let text = "# run\nT = 10\n lr_max=1e-3 # inline\n\nvariant = conv\nbatch_size = 4\nwarmup_steps = 5\ntotal_steps = 50\n";
        let r = RunConfig::parse(text).unwrap();
        assert_eq!(r.schedule.steps, 10);
        assert_eq!(r.train.steps, 10);
        assert_eq!(r.train.lr_max, 1e-3);
        assert!(!r.net.use_window_attention);
        assert_eq!(r.train.batch_size, 4);
        assert_eq!(r.schedule.beta_1, 4e-4);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("T = x").is_err());
        assert!(RunConfig::parse("unknown = 1").is_err());
        assert!(RunConfig::parse("T = 3\nT = 4").is_err());
        assert!(RunConfig::parse("= 4").is_err());
        assert!(RunConfig::parse("warmup_steps = 100\ntotal_steps = 10").is_err());
        assert!(RunConfig::parse("variant = unet").is_err());
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let err = RunConfig::parse("T = 15\nbogus = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
    }
}
