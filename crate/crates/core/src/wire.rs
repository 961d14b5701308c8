//! Line-delimited JSON protocol spoken between the harness and an external
//! model adapter process.
//!
//! The harness launches `<command> --serve` and writes one request object per
//! line to the child's stdin; the child answers each with exactly one response
//! line on stdout carrying the same `request_id`. Requests are strictly serial.
//!
//! ```text
//! > {"request_id":1,"op":"hello"}
//! < {"request_id":1,"ok":true,"name":"mock","version":"0.1.0","max_token_budget":2048}
//! > {"request_id":2,"op":"predict","instances":[{"id":"a","code":"..."}]}
//! < {"request_id":2,"ok":true,"predictions":[{"id":"a","prob_fixed":0.3,"prob_vulnerable":0.7}]}
//! > {"request_id":3,"op":"frobnicate"}
//! < {"request_id":3,"ok":false,"error":"unknown variant `frobnicate` ..."}
//! ```
//!
//! Predict payloads never carry labels.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::model::LossMode;

/// Instance fields sent for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledInstance {
    pub id: String,
    pub code: String,
}

impl From<&Instance> for UnlabeledInstance {
    fn from(i: &Instance) -> Self {
        Self {
            id: i.id.clone(),
            code: i.code.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// `[fixed, vulnerable]`; all-ones under plain loss.
    pub class_weights: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    Reset,
    Train {
        instances: Vec<Instance>,
        hyperparameters: Hyperparameters,
    },
    Predict {
        instances: Vec<UnlabeledInstance>,
    },
    CheckpointSave {
        path: String,
    },
    CheckpointLoad {
        path: String,
    },
    Shutdown,
}

impl Request {
    pub fn op_name(&self) -> &'static str {
        match self {
            Request::Hello => "hello",
            Request::Reset => "reset",
            Request::Train { .. } => "train",
            Request::Predict { .. } => "predict",
            Request::CheckpointSave { .. } => "checkpoint_save",
            Request::CheckpointLoad { .. } => "checkpoint_load",
            Request::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub request_id: u64,
    #[serde(flatten)]
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub id: String,
    pub prob_fixed: f64,
    pub prob_vulnerable: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    /// `None` only when the request line could not be parsed at all.
    pub request_id: Option<u64>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_token_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<Vec<WirePrediction>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
}

impl Response {
    pub fn ok(request_id: u64) -> Self {
        Self {
            request_id: Some(request_id),
            ok: true,
            ..Default::default()
        }
    }

    pub fn error(request_id: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            request_id,
            ok: false,
            error: Some(message.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloInfo {
    pub name: String,
    pub version: String,
    pub max_token_budget: usize,
    pub metadata: Option<serde_json::Value>,
}

/// What an adapter does with each decoded request. Returning `Err` produces
/// an error response; the loop keeps serving unless the error is fatal.
pub trait AdapterHandler {
    fn hello(&mut self) -> HelloInfo;
    fn reset(&mut self) -> Result<(), String>;
    fn train(&mut self, instances: &[Instance], hp: &Hyperparameters) -> Result<(usize, f64), String>;
    fn predict(&mut self, instances: &[UnlabeledInstance]) -> Result<Vec<WirePrediction>, String>;
    fn checkpoint_save(&mut self, path: &str) -> Result<(), String>;
    fn checkpoint_load(&mut self, path: &str) -> Result<(), String>;
}

/// Parses one line and dispatches it. The flag is true once shutdown was requested.
pub fn handle_line<H: AdapterHandler>(handler: &mut H, line: &str) -> (Response, bool) {
    let envelope: RequestEnvelope = match serde_json::from_str(line) {
        Ok(env) => env,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("request_id").and_then(serde_json::Value::as_u64));
            return (Response::error(id, format!("malformed request: {e}")), false);
        }
    };
    let id = envelope.request_id;
    let done = |r: Result<(), String>| match r {
        Ok(()) => Response::ok(id),
        Err(e) => Response::error(Some(id), e),
    };
    match envelope.request {
        Request::Hello => {
            let info = handler.hello();
            let mut r = Response::ok(id);
            r.name = Some(info.name);
            r.version = Some(info.version);
            r.max_token_budget = Some(info.max_token_budget);
            r.metadata = info.metadata;
            (r, false)
        }
        Request::Reset => (done(handler.reset()), false),
        Request::Train {
            instances,
            hyperparameters,
        } => match handler.train(&instances, &hyperparameters) {
            Ok((steps, loss)) => {
                let mut r = Response::ok(id);
                r.steps = Some(steps);
                r.final_loss = loss.is_finite().then_some(loss);
                (r, false)
            }
            Err(e) => (Response::error(Some(id), e), false),
        },
        Request::Predict { instances } => match handler.predict(&instances) {
            Ok(preds) => {
                let mut r = Response::ok(id);
                r.predictions = Some(preds);
                (r, false)
            }
            Err(e) => (Response::error(Some(id), e), false),
        },
        Request::CheckpointSave { path } => (done(handler.checkpoint_save(&path)), false),
        Request::CheckpointLoad { path } => (done(handler.checkpoint_load(&path)), false),
        Request::Shutdown => (Response::ok(id), true),
    }
}

/// Request/response loop over arbitrary streams. Returns when shutdown is
/// requested or the input closes.
pub fn serve<H: AdapterHandler, R: BufRead, W: Write>(handler: &mut H, input: R, mut output: W) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (response, shutdown) = handle_line(handler, &line);
        serde_json::to_writer(&mut output, &response)?;
        output.write_all(b"\n")?;
        output.flush()?;
        if shutdown {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;

    impl AdapterHandler for Echo {
        fn hello(&mut self) -> HelloInfo {
            HelloInfo {
                name: "echo".into(),
                version: "0".into(),
                max_token_budget: 16,
                metadata: None,
            }
        }
        fn reset(&mut self) -> Result<(), String> {
            Ok(())
        }
        fn train(&mut self, _: &[Instance], _: &Hyperparameters) -> Result<(usize, f64), String> {
            Err("no training here".into())
        }
        fn predict(&mut self, instances: &[UnlabeledInstance]) -> Result<Vec<WirePrediction>, String> {
            Ok(instances
                .iter()
                .map(|i| WirePrediction {
                    id: i.id.clone(),
                    prob_fixed: 0.25,
                    prob_vulnerable: 0.75,
                })
                .collect())
        }
        fn checkpoint_save(&mut self, _: &str) -> Result<(), String> {
            Ok(())
        }
        fn checkpoint_load(&mut self, _: &str) -> Result<(), String> {
            Ok(())
        }
    }

    #[test]
    fn request_encoding_is_flat() {
        let env = RequestEnvelope {
            request_id: 4,
            request: Request::CheckpointSave { path: "/tmp/x".into() },
        };
        assert_eq!(
            serde_json::to_string(&env).unwrap(),
            r#"{"request_id":4,"op":"checkpoint_save","path":"/tmp/x"}"#
        );
    }

    #[test]
    fn serve_answers_every_line_in_order() {
        let input = concat!(
            r#"{"request_id":1,"op":"hello"}"#,
            "\n",
            "not json\n",
            r#"{"request_id":7,"op":"bogus"}"#,
            "\n",
            r#"{"request_id":2,"op":"train","instances":[],"hyperparameters":{"learning_rate":0.1,"epochs":1,"batch_size":2,"weight_decay":0,"seed":0,"loss_mode":"plain","class_weights":[1,1]}}"#,
            "\n",
            r#"{"request_id":3,"op":"predict","instances":[{"id":"a","code":"x"}]}"#,
            "\n",
            r#"{"request_id":4,"op":"shutdown"}"#,
            "\n",
            r#"{"request_id":5,"op":"hello"}"#,
            "\n",
        );
        let mut out = Vec::new();
        serve(&mut Echo, input.as_bytes(), &mut out).unwrap();
        let responses: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let ids: Vec<Option<u64>> = responses.iter().map(|r| r.request_id).collect();
        assert_eq!(ids, vec![Some(1), None, Some(7), Some(2), Some(3), Some(4)]);
        assert_eq!(responses[0].name.as_deref(), Some("echo"));
        assert!(!responses[1].ok && !responses[2].ok && !responses[3].ok);
        assert_eq!(responses[4].predictions.as_ref().unwrap()[0].prob_vulnerable, 0.75);
        assert!(responses[5].ok);
    }
}
