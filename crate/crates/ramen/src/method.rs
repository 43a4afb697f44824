use std::fmt;
use std::str::FromStr;

use ramen_core::{
    entmin_baseline, zero_shot_baseline, AdaptOutcome, Ramen, RamenConfig, Sample, TextBank,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Method ids accepted by `ramen run --method`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ramen,
    Entmin,
    Zeroshot,
    /// One shared queue instead of per-class queues.
    RamenNoPb,
    /// Uniform random selection instead of nearest neighbours.
    RamenNoDc,
    RamenNoPbDc,
    /// Entropy factor of the support weights replaced by 1.
    RamenNoEntw,
    /// Similarity factor of the support weights replaced by 1.
    RamenNoSimw,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ramen,
        Method::Entmin,
        Method::Zeroshot,
        Method::RamenNoPb,
        Method::RamenNoDc,
        Method::RamenNoPbDc,
        Method::RamenNoEntw,
        Method::RamenNoSimw,
    ];

    /// The five ablations of the full method.
    pub const ABLATIONS: [Method; 5] = [
        Method::RamenNoPb,
        Method::RamenNoDc,
        Method::RamenNoPbDc,
        Method::RamenNoEntw,
        Method::RamenNoSimw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ramen => "ramen",
            Method::Entmin => "entmin",
            Method::Zeroshot => "zeroshot",
            Method::RamenNoPb => "ramen-no-pb",
            Method::RamenNoDc => "ramen-no-dc",
            Method::RamenNoPbDc => "ramen-no-pb-dc",
            Method::RamenNoEntw => "ramen-no-entw",
            Method::RamenNoSimw => "ramen-no-simw",
        }
    }

    /// Whether the method runs the adaptation engine.
    pub fn uses_memory(self) -> bool {
        !matches!(self, Method::Entmin | Method::Zeroshot)
    }

    /// `base` with this method's switches applied.
    pub fn configure(self, base: &RamenConfig) -> RamenConfig {
        let mut cfg = base.clone();
        match self {
            Method::Ramen | Method::Entmin | Method::Zeroshot => {}
            Method::RamenNoPb => cfg.split_memory = false,
            Method::RamenNoDc => {
                cfg.topk_selection = false;
                cfg.beta = 0.0;
            }
            Method::RamenNoPbDc => {
                cfg.split_memory = false;
                cfg.topk_selection = false;
                cfg.beta = 0.0;
            }
            Method::RamenNoEntw => cfg.entropy_weighting = false,
            Method::RamenNoSimw => cfg.similarity_weighting = false,
        }
        cfg
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown method id {s:?}")))
    }
}

pub struct MethodRun {
    pub outcomes: Vec<AdaptOutcome>,
    /// Final engine state for memory-based methods.
    pub engine: Option<Ramen>,
}

/// One full pass of `method` over `stream`.
pub fn run_method(
    method: Method,
    stream: &[Sample],
    bank: &TextBank,
    base: &RamenConfig,
) -> Result<MethodRun> {
    let cfg = method.configure(base);
    cfg.validate()?;
    if method.uses_memory() {
        let mut engine = Ramen::new(cfg, bank.clone())?;
        let outcomes = engine.run(stream)?;
        return Ok(MethodRun {
            outcomes,
            engine: Some(engine),
        });
    }
    let zero_shot = zero_shot_baseline(stream, bank)?;
    let adapted = match method {
        Method::Entmin => entmin_baseline(stream, &cfg, bank)?,
        _ => zero_shot.clone(),
    };
    let outcomes = adapted
        .into_iter()
        .zip(zero_shot)
        .map(|(prediction, zero_shot)| AdaptOutcome {
            prediction,
            zero_shot,
            support_size: 0,
            support_domain_ids: Vec::new(),
        })
        .collect();
    Ok(MethodRun {
        outcomes,
        engine: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("tent".parse::<Method>().is_err());
    }

    #[test]
    fn ablation_switches() {
        let base = RamenConfig::reference();
        let c = Method::RamenNoPbDc.configure(&base);
        assert!(!c.split_memory && !c.topk_selection && c.beta == 0.0);
        c.validate().unwrap();
        assert!(!Method::RamenNoEntw.configure(&base).entropy_weighting);
        assert!(!Method::RamenNoSimw.configure(&base).similarity_weighting);
        assert_eq!(Method::Ramen.configure(&base), base);
    }
}
