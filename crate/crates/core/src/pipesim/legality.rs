//! Trace checker written independently of the builder: it derives the expected
//! work from the config alone and checks device exclusivity and data
//! dependencies on the events as given.

use std::collections::HashMap;

use super::{BatchKind, EventKind, PipelineConfig, ScheduleTrace, Strategy};
use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

type Key = (usize, usize, usize, usize, EventKind); // batch, pipeline, micro-batch, stage, kind

fn fail(msg: String) -> Result<()> {
    Err(Error::Schedule(format!("illegal schedule: {msg}")))
}

/// Which pipeline a micro-batch belongs to, and the device running `stage` of it.
fn placement(cfg: &PipelineConfig, micro_batch: usize, stage: usize) -> (usize, usize) {
    if cfg.strategy == Strategy::Chimera && micro_batch >= cfg.micro_batches / 2 {
        (1, cfg.devices - 1 - stage)
    } else {
        (0, stage)
    }
}

pub fn check_legality(trace: &ScheduleTrace, cfg: &PipelineConfig) -> Result<()> {
    let d = cfg.devices;
    if trace.devices != d || trace.micro_batches != cfg.micro_batches {
        return fail("trace dimensions differ from the config".into());
    }

    let mut seen: HashMap<Key, (f64, f64)> = HashMap::new();
    for e in &trace.events {
        if e.device >= d || e.stage >= d || e.micro_batch >= cfg.micro_batches || e.batch >= trace.batches.len() {
            return fail(format!("event out of range: {e:?}"));
        }
        let (pipe, dev) = placement(cfg, e.micro_batch, e.stage);
        if e.pipeline != pipe || e.device != dev {
            return fail(format!("event on the wrong device or pipeline: {e:?}"));
        }
        let want = match e.kind {
            EventKind::Fw => 1.0,
            EventKind::Bw => cfg.bw_ratio,
            EventKind::PredictorFw => cfg.predictor_alpha.unwrap_or(f64::NAN),
        };
        if (e.duration - want).abs() > EPS || e.start < -EPS {
            return fail(format!("bad timing: {e:?}"));
        }
        if e.kind == EventKind::Bw && trace.batches[e.batch] == BatchKind::Gp {
            return fail(format!("backward work in a GP batch: {e:?}"));
        }
        if seen.insert((e.batch, e.pipeline, e.micro_batch, e.stage, e.kind), (e.start, e.end())).is_some() {
            return fail(format!("duplicate event: {e:?}"));
        }
    }

    // every expected operation is present
    let per_fw = 1 + usize::from(cfg.predictor_alpha.is_some());
    let expected: usize = trace
        .batches
        .iter()
        .map(|k| d * cfg.micro_batches * (per_fw + usize::from(*k == BatchKind::Bp)))
        .sum();
    if seen.len() != expected {
        return fail(format!("{} events, expected {expected}", seen.len()));
    }

    // dependencies
    for (&(b, p, m, s, kind), &(start, _)) in &seen {
        let dep = match kind {
            EventKind::Fw if s == 0 => continue,
            EventKind::Fw => (b, p, m, s - 1, EventKind::Fw),
            EventKind::Bw if s == d - 1 => (b, p, m, s, EventKind::Fw),
            EventKind::Bw => (b, p, m, s + 1, EventKind::Bw),
            EventKind::PredictorFw => (b, p, m, s, EventKind::Fw),
        };
        match seen.get(&dep) {
            Some(&(_, end)) if end <= start + EPS => {}
            Some(_) => return fail(format!("{kind:?} of batch {b} micro-batch {m} stage {s} starts before its input is ready")),
            None => return fail(format!("missing dependency {dep:?}")),
        }
    }

    // device exclusivity
    let mut by_device: Vec<Vec<(f64, f64)>> = vec![Vec::new(); d];
    for e in &trace.events {
        by_device[e.device].push((e.start, e.end()));
    }
    for (dev, spans) in by_device.iter_mut().enumerate() {
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1 - EPS) {
            return fail(format!("device {dev} runs two events at once around step {}", w[1].0));
        }
    }

    // one barrier per BP batch, after all of its work
    let bp: Vec<usize> = (0..trace.batches.len()).filter(|&b| trace.batches[b] == BatchKind::Bp).collect();
    if trace.barriers.iter().map(|b| b.batch).collect::<Vec<_>>() != bp {
        return fail("synchronization barriers do not match the BP batches".into());
    }
    for bar in &trace.barriers {
        let last = trace.events.iter().filter(|e| e.batch == bar.batch).map(|e| e.end()).fold(0.0, f64::max);
        if bar.step + EPS < last {
            return fail(format!("barrier of batch {} precedes its work", bar.batch));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipesim::build_schedule;

    #[test]
    fn catches_overlap_and_dependency_breaks() {
        let cfg = PipelineConfig::default();
        let good = build_schedule(&cfg).unwrap();
        check_legality(&good, &cfg).unwrap();

        let mut t = good.clone();
        let i = t.events.iter().position(|e| e.stage == 1 && e.kind == EventKind::Fw).unwrap();
        t.events[i].start = 0.0;
        assert!(check_legality(&t, &cfg).is_err());

        let mut t = good.clone();
        t.events.pop();
        assert!(check_legality(&t, &cfg).is_err());

        let mut t = good;
        t.barriers.clear();
        assert!(check_legality(&t, &cfg).is_err());
    }
}
