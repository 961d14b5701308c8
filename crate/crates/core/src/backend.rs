//! Uniform model interface driven by the strategies, with the built-in
//! reference backend and a client for external adapter processes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::model::{
    class_weights, AdapterConfig, AdapterModel, LossMode, OrthoState, Prediction, TrainConfig, TrainReport,
};
use crate::wire::{
    AdapterHandler, HelloInfo, Hyperparameters, Request, RequestEnvelope, Response, UnlabeledInstance, WirePrediction,
};

/// Tolerance on `prob_fixed + prob_vulnerable` for external predictions.
pub const WIRE_PROB_TOLERANCE: f64 = 1e-6;

pub struct TrainRequest<'a> {
    pub window: &'a [Instance],
    pub replay: &'a [Instance],
    pub config: &'a TrainConfig,
    /// Window-level class weights; computed from `window` when absent.
    pub class_weights: Option<[f64; 2]>,
    pub ortho: Option<&'a OrthoState>,
}

pub trait ModelBackend: Send {
    fn name(&self) -> String;

    /// Restores the pristine, untrained model.
    fn reset(&mut self) -> Result<()>;

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainReport>;

    fn predict(&mut self, instances: &[Instance]) -> Result<Vec<Prediction>>;

    fn save_checkpoint(&mut self, path: &Path) -> Result<()>;

    fn load_checkpoint(&mut self, path: &Path) -> Result<()>;

    /// The in-process model, when there is one. Needed by the orthogonality regularizer.
    fn reference_model(&self) -> Option<&AdapterModel> {
        None
    }
}

/// Which backend a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    #[default]
    Reference,
    /// Command line of an adapter; `--serve` is appended at launch.
    External(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "reference" => Ok(BackendSpec::Reference),
            Some(("external", cmd)) if !cmd.trim().is_empty() => Ok(BackendSpec::External(cmd.trim().to_string())),
            _ => Err(Error::Config(format!(
                "backend `{s}` must be `reference` or `external:CMD`"
            ))),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Reference => write!(f, "reference"),
            BackendSpec::External(cmd) => write!(f, "external:{cmd}"),
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl BackendSpec {
    pub fn instantiate(&self, adapter: &AdapterConfig) -> Result<Box<dyn ModelBackend>> {
        Ok(match self {
            BackendSpec::Reference => Box::new(ReferenceBackend::new(*adapter)),
            BackendSpec::External(cmd) => Box::new(ExternalBackend::spawn(cmd)?),
        })
    }
}

pub struct ReferenceBackend {
    pristine: AdapterModel,
    model: AdapterModel,
    last_config: Option<TrainConfig>,
}

impl ReferenceBackend {
    pub fn new(config: AdapterConfig) -> Self {
        let pristine = AdapterModel::new(config);
        Self {
            model: pristine.clone(),
            pristine,
            last_config: None,
        }
    }

    pub fn model(&self) -> &AdapterModel {
        &self.model
    }
}

impl ModelBackend for ReferenceBackend {
    fn name(&self) -> String {
        "reference".into()
    }

    fn reset(&mut self) -> Result<()> {
        self.model = self.pristine.clone();
        Ok(())
    }

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainReport> {
        self.last_config = Some(request.config.clone());
        self.model.train(
            request.window,
            request.replay,
            request.config,
            request.class_weights,
            request.ortho,
        )
    }

    fn predict(&mut self, instances: &[Instance]) -> Result<Vec<Prediction>> {
        Ok(self.model.predict(instances))
    }

    fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.model.save(path, self.last_config.as_ref())
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let loaded = AdapterModel::load(path)?;
        if loaded.config() != self.pristine.config() {
            return Err(Error::Model(
                "checkpoint adapter config differs from this backend".into(),
            ));
        }
        self.model = loaded;
        Ok(())
    }

    fn reference_model(&self) -> Option<&AdapterModel> {
        Some(&self.model)
    }
}

/// Client side of the wire protocol over a child process.
pub struct ExternalBackend {
    command: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
    hello: HelloInfo,
}

impl ExternalBackend {
    /// Launches `command --serve` and performs the handshake.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty external adapter command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .arg("--serve")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(format!("launching adapter `{command}`"), e))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut backend = Self {
            command: command.to_string(),
            child,
            stdin,
            stdout,
            next_id: 1,
            hello: HelloInfo {
                name: String::new(),
                version: String::new(),
                max_token_budget: 0,
                metadata: None,
            },
        };
        let r = backend.call(Request::Hello)?;
        backend.hello = HelloInfo {
            name: r
                .name
                .ok_or_else(|| Error::Protocol("hello response lacks `name`".into()))?,
            version: r
                .version
                .ok_or_else(|| Error::Protocol("hello response lacks `version`".into()))?,
            max_token_budget: r
                .max_token_budget
                .ok_or_else(|| Error::Protocol("hello response lacks `max_token_budget`".into()))?,
            metadata: r.metadata,
        };
        Ok(backend)
    }

    pub fn hello(&self) -> &HelloInfo {
        &self.hello
    }

    /// Sends one raw line and reads one response line, without checking ids.
    pub fn send_raw(&mut self, line: &str) -> Result<Response> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::io("writing to adapter", e))?;
        let mut buf = String::new();
        let n = self
            .stdout
            .read_line(&mut buf)
            .map_err(|e| Error::io("reading from adapter", e))?;
        if n == 0 {
            return Err(Error::Protocol(format!("adapter `{}` closed its output", self.command)));
        }
        serde_json::from_str(&buf).map_err(|e| Error::Protocol(format!("bad response line `{}`: {e}", buf.trim())))
    }

    /// Sends a request and returns the successful response.
    pub fn call(&mut self, request: Request) -> Result<Response> {
        let id = self.next_id;
        self.next_id += 1;
        let op = request.op_name();
        let line = serde_json::to_string(&RequestEnvelope {
            request_id: id,
            request,
        })?;
        let response = self.send_raw(&line)?;
        if response.request_id != Some(id) {
            return Err(Error::Protocol(format!(
                "response id {:?} does not match request {id}",
                response.request_id
            )));
        }
        if !response.ok {
            return Err(Error::Protocol(format!(
                "{op} failed: {}",
                response.error.as_deref().unwrap_or("no message")
            )));
        }
        Ok(response)
    }

    /// Waits for the child after asking it to exit.
    pub fn shutdown(mut self) -> Result<std::process::ExitStatus> {
        self.call(Request::Shutdown)?;
        self.child.wait().map_err(|e| Error::io("waiting for adapter", e))
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let line = serde_json::to_string(&RequestEnvelope {
                request_id: self.next_id,
                request: Request::Shutdown,
            })
            .unwrap_or_default();
            let _ = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush());
            let started = Instant::now();
            while started.elapsed().as_secs_f64() < 2.0 {
                if let Ok(Some(_)) = self.child.try_wait() {
                    return;
                }
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

impl ModelBackend for ExternalBackend {
    fn name(&self) -> String {
        format!("external:{} ({} {})", self.command, self.hello.name, self.hello.version)
    }

    fn reset(&mut self) -> Result<()> {
        self.call(Request::Reset).map(|_| ())
    }

    fn train(&mut self, request: &TrainRequest<'_>) -> Result<TrainReport> {
        if request.config.ortho_beta > 0.0 || request.ortho.is_some_and(|o| !o.is_empty()) {
            return Err(Error::Unsupported {
                backend: self.name(),
                what: "orthogonality regularization needs gradient access".into(),
            });
        }
        let weights = match request.config.loss_mode {
            LossMode::Plain => [1.0, 1.0],
            LossMode::ClassWeighted => request
                .class_weights
                .unwrap_or_else(|| class_weights(request.window.iter().map(|i| &i.label))),
        };
        let instances: Vec<Instance> = request.window.iter().chain(request.replay).cloned().collect();
        let hyperparameters = Hyperparameters {
            learning_rate: request.config.learning_rate,
            epochs: request.config.epochs,
            batch_size: request.config.batch_size,
            weight_decay: request.config.weight_decay,
            seed: request.config.seed,
            loss_mode: request.config.loss_mode,
            class_weights: weights,
        };
        let started = Instant::now();
        let r = self.call(Request::Train {
            instances,
            hyperparameters,
        })?;
        Ok(TrainReport {
            wall_time_s: started.elapsed().as_secs_f64(),
            steps: r.steps.unwrap_or(0),
            examples: request.window.len() + request.replay.len(),
            final_loss: r.final_loss.unwrap_or(f64::NAN),
        })
    }

    fn predict(&mut self, instances: &[Instance]) -> Result<Vec<Prediction>> {
        let payload: Vec<UnlabeledInstance> = instances.iter().map(UnlabeledInstance::from).collect();
        let r = self.call(Request::Predict { instances: payload })?;
        let preds = r
            .predictions
            .ok_or_else(|| Error::Protocol("predict response lacks `predictions`".into()))?;
        if preds.len() != instances.len() {
            return Err(Error::Protocol(format!(
                "predict returned {} predictions for {} instances",
                preds.len(),
                instances.len()
            )));
        }
        instances
            .iter()
            .zip(preds)
            .map(|(inst, p)| {
                if p.id != inst.id {
                    return Err(Error::Protocol(format!(
                        "prediction for `{}` where `{}` was expected",
                        p.id, inst.id
                    )));
                }
                let valid = p.prob_fixed >= 0.0
                    && p.prob_vulnerable >= 0.0
                    && (p.prob_fixed + p.prob_vulnerable - 1.0).abs() <= WIRE_PROB_TOLERANCE;
                if !valid {
                    return Err(Error::Protocol(format!(
                        "probabilities for `{}` are not a distribution: {} + {}",
                        p.id, p.prob_fixed, p.prob_vulnerable
                    )));
                }
                Ok(Prediction::from_probs(p.prob_fixed, p.prob_vulnerable))
            })
            .collect()
    }

    fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.call(Request::CheckpointSave {
            path: path.display().to_string(),
        })
        .map(|_| ())
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.call(Request::CheckpointLoad {
            path: path.display().to_string(),
        })
        .map(|_| ())
    }
}

/// Serves the reference model over the wire protocol, so the protocol path
/// can be exercised end to end with a real learner.
pub struct ReferenceAdapter {
    backend: ReferenceBackend,
}

impl ReferenceAdapter {
    pub fn new(config: AdapterConfig) -> Self {
        Self {
            backend: ReferenceBackend::new(config),
        }
    }
}

fn to_wire(instances: &[UnlabeledInstance], preds: Vec<Prediction>) -> Vec<WirePrediction> {
    instances
        .iter()
        .zip(preds)
        .map(|(i, p)| WirePrediction {
            id: i.id.clone(),
            prob_fixed: p.prob_fixed,
            prob_vulnerable: p.prob_vulnerable,
        })
        .collect()
}

impl AdapterHandler for ReferenceAdapter {
    fn hello(&mut self) -> HelloInfo {
        HelloInfo {
            name: "driftharness-reference".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            max_token_budget: self.backend.model().config().features.token_budget,
            metadata: Some(serde_json::json!({ "adapter": self.backend.model().config() })),
        }
    }

    fn reset(&mut self) -> std::result::Result<(), String> {
        self.backend.reset().map_err(|e| e.to_string())
    }

    fn train(&mut self, instances: &[Instance], hp: &Hyperparameters) -> std::result::Result<(usize, f64), String> {
        if hp.epochs == 0 || instances.is_empty() {
            return Ok((0, f64::NAN));
        }
        let config = TrainConfig {
            learning_rate: hp.learning_rate,
            epochs: hp.epochs,
            batch_size: hp.batch_size,
            weight_decay: hp.weight_decay,
            seed: hp.seed,
            loss_mode: hp.loss_mode,
            ortho_beta: 0.0,
        };
        let req = TrainRequest {
            window: instances,
            replay: &[],
            config: &config,
            class_weights: Some(hp.class_weights),
            ortho: None,
        };
        self.backend
            .train(&req)
            .map(|r| (r.steps, r.final_loss))
            .map_err(|e| e.to_string())
    }

    fn predict(&mut self, instances: &[UnlabeledInstance]) -> std::result::Result<Vec<WirePrediction>, String> {
        let model = self.backend.model();
        let preds = instances
            .iter()
            .map(|i| model.predict_features(&model.featurize(&i.code)))
            .collect();
        Ok(to_wire(instances, preds))
    }

    fn checkpoint_save(&mut self, path: &str) -> std::result::Result<(), String> {
        self.backend.save_checkpoint(Path::new(path)).map_err(|e| e.to_string())
    }

    fn checkpoint_load(&mut self, path: &str) -> std::result::Result<(), String> {
        self.backend.load_checkpoint(Path::new(path)).map_err(|e| e.to_string())
    }
}

/// Test adapter that echoes probabilities embedded in the code as `p=<value>`
/// (default 0.5), shifted by a bias that grows by 1e-4 per trained epoch.
#[derive(Debug, Default)]
pub struct MockAdapter {
    bias: f64,
}

impl MockAdapter {
    pub fn embedded_probability(code: &str) -> f64 {
        code.find("p=")
            .and_then(|pos| {
                let rest = &code[pos + 2..];
                let end = rest
                    .find(|c: char| !(c.is_ascii_digit() || c == '.'))
                    .unwrap_or(rest.len());
                rest[..end].parse::<f64>().ok()
            })
            .unwrap_or(0.5)
    }
}

impl AdapterHandler for MockAdapter {
    fn hello(&mut self) -> HelloInfo {
        HelloInfo {
            name: "mock".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            max_token_budget: 2048,
            metadata: Some(serde_json::json!({
                "note": "echoes embedded probabilities; not a learner"
            })),
        }
    }

    fn reset(&mut self) -> std::result::Result<(), String> {
        self.bias = 0.0;
        Ok(())
    }

    fn train(&mut self, _: &[Instance], hp: &Hyperparameters) -> std::result::Result<(usize, f64), String> {
        self.bias += 1e-4 * hp.epochs as f64;
        Ok((hp.epochs, 0.0))
    }

    fn predict(&mut self, instances: &[UnlabeledInstance]) -> std::result::Result<Vec<WirePrediction>, String> {
        Ok(instances
            .iter()
            .map(|i| {
                let p = (Self::embedded_probability(&i.code) + self.bias).clamp(0.0, 1.0);
                WirePrediction {
                    id: i.id.clone(),
                    prob_fixed: 1.0 - p,
                    prob_vulnerable: p,
                }
            })
            .collect())
    }

    fn checkpoint_save(&mut self, path: &str) -> std::result::Result<(), String> {
        std::fs::write(path, serde_json::json!({ "bias": self.bias }).to_string()).map_err(|e| e.to_string())
    }

    fn checkpoint_load(&mut self, path: &str) -> std::result::Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        self.bias = v["bias"].as_f64().ok_or("checkpoint lacks `bias`")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("reference".parse::<BackendSpec>().unwrap(), BackendSpec::Reference);
        assert_eq!(
            "external:python adapter.py".parse::<BackendSpec>().unwrap(),
            BackendSpec::External("python adapter.py".into())
        );
        assert!("external:".parse::<BackendSpec>().is_err());
        assert!("gpu".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn mock_reads_embedded_probability() {
        assert_eq!(MockAdapter::embedded_probability("int f(){} /* p=0.83 */"), 0.83);
        assert_eq!(MockAdapter::embedded_probability("int f(){}"), 0.5);
    }
}
