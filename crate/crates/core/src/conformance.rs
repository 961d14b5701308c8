//! Protocol conformance checks for external adapters.
//!
//! Each check launches its own adapter process so a failure in one does not
//! poison the others.

use chrono::NaiveDate;

use crate::backend::{ExternalBackend, ModelBackend, TrainRequest, WIRE_PROB_TOLERANCE};
use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::wire::{Request, UnlabeledInstance};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn probe_instances() -> Vec<Instance> {
    let date = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date");
    vec![
        Instance::new(
            "probe-1",
            "int f(char *d, char *s) { strcpy(d, s); } /* p=0.9 */",
            1,
            date,
        ),
        Instance::new("probe-2", "int g(int n) { return n > 0 ? n : 0; } /* p=0.2 */", 0, date),
        Instance::new("probe-3", "void h(void) {}", 0, date),
    ]
}

fn check(name: &'static str, body: impl FnOnce() -> Result<String>) -> CheckOutcome {
    match body() {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Protocol(msg.into()))
    }
}

pub fn run_conformance(command: &str) -> Vec<CheckOutcome> {
    let instances = probe_instances();
    let train_cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 2,
        batch_size: 2,
        ..Default::default()
    };
    vec![
        check("handshake", || {
            let b = ExternalBackend::spawn(command)?;
            let h = b.hello().clone();
            ensure(
                !h.name.is_empty() && h.max_token_budget > 0,
                "hello must name the adapter and a positive budget",
            )?;
            Ok(format!("{} {} budget {}", h.name, h.version, h.max_token_budget))
        }),
        check("request_ordering", || {
            let mut b = ExternalBackend::spawn(command)?;
            for _ in 0..5 {
                b.call(Request::Hello)?;
            }
            Ok("5 sequential ids echoed".into())
        }),
        check("error_recovery", || {
            let mut b = ExternalBackend::spawn(command)?;
            let bad = b.send_raw("{this is not json")?;
            ensure(
                !bad.ok && bad.error.is_some(),
                "malformed line must yield an error response",
            )?;
            let unknown = b.send_raw(r#"{"request_id":99,"op":"no_such_op"}"#)?;
            ensure(
                !unknown.ok && unknown.request_id == Some(99),
                "unknown op must yield an error with its id",
            )?;
            b.call(Request::Hello)?;
            Ok("adapter survived malformed requests".into())
        }),
        check("probability_normalization", || {
            let mut b = ExternalBackend::spawn(command)?;
            let payload: Vec<UnlabeledInstance> = instances.iter().map(UnlabeledInstance::from).collect();
            let r = b.call(Request::Predict { instances: payload })?;
            let preds = r.predictions.unwrap_or_default();
            ensure(
                preds.len() == instances.len(),
                format!("expected {} predictions", instances.len()),
            )?;
            for (p, i) in preds.iter().zip(&instances) {
                ensure(p.id == i.id, "prediction ids must follow request order")?;
                ensure(
                    (p.prob_fixed + p.prob_vulnerable - 1.0).abs() <= WIRE_PROB_TOLERANCE,
                    format!("{}: probabilities sum to {}", p.id, p.prob_fixed + p.prob_vulnerable),
                )?;
            }
            Ok(format!("{} normalized predictions", preds.len()))
        }),
        check("epochs_zero_noop", || {
            let mut b = ExternalBackend::spawn(command)?;
            let before = b.predict(&instances)?;
            let cfg = TrainConfig {
                epochs: 0,
                ..train_cfg.clone()
            };
            b.train(&TrainRequest {
                window: &instances,
                replay: &[],
                config: &cfg,
                class_weights: None,
                ortho: None,
            })?;
            let after = b.predict(&instances)?;
            ensure(before == after, "predictions changed after a zero-epoch train")?;
            Ok("unchanged".into())
        }),
        check("checkpoint_roundtrip", || {
            let dir = tempfile::tempdir().map_err(|e| Error::io("creating scratch dir", e))?;
            let path = dir.path().join("adapter.ckpt");
            let mut b = ExternalBackend::spawn(command)?;
            b.train(&TrainRequest {
                window: &instances,
                replay: &[],
                config: &train_cfg,
                class_weights: None,
                ortho: None,
            })?;
            let trained = b.predict(&instances)?;
            b.save_checkpoint(&path)?;
            b.reset()?;
            b.load_checkpoint(&path)?;
            let restored = b.predict(&instances)?;
            ensure(trained == restored, "predictions after checkpoint reload differ")?;
            Ok("bit-identical predictions after reload".into())
        }),
        check("clean_shutdown", || {
            let b = ExternalBackend::spawn(command)?;
            let status = b.shutdown()?;
            ensure(status.success(), format!("adapter exited with {status}"))?;
            Ok("exit 0".into())
        }),
    ]
}
