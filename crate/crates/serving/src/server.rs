//! Model server: answers FORECAST_REQ frames from loaded artifacts, either
//! on its own listening socket or by consuming a broker topic.

use std::collections::BTreeMap;
use std::io::{self, BufReader};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use redf_core::forecast::Forecaster;
use redf_core::lstm::ModelParams;
use redf_core::timeseries::Scaler;

use crate::artifact::{self, ArtifactError};
use crate::frame::{read_frame, write_frame, Message};
use crate::net::{serve, ServerHandle};
use crate::reply_topic;

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub forecaster: Forecaster,
    pub version: String,
}

/// Immutable set of models keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, LoadedModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load artifacts; each model is named after its file stem.
    pub fn load<P: AsRef<Path>>(paths: &[P]) -> Result<Self, ArtifactError> {
        let mut reg = Self::new();
        for p in paths {
            let p = p.as_ref();
            let bytes = std::fs::read(p).map_err(|source| ArtifactError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let (params, scaler) = artifact::from_bytes(&bytes)?;
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
            reg.insert(&name, params, scaler, format!("{name}@{crc:08x}"));
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: &str, params: ModelParams, scaler: Scaler, version: String) {
        self.models.insert(
            name.to_string(),
            LoadedModel {
                forecaster: Forecaster::new(params, scaler),
                version,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&LoadedModel> {
        self.models.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn answer(&self, msg: Message) -> Message {
        let Message::ForecastReq {
            id,
            model,
            horizon,
            history,
            ..
        } = msg
        else {
            return Message::error(msg.id(), "unsupported_type", "the model server accepts FORECAST_REQ");
        };
        let Some(loaded) = self.models.get(&model) else {
            return Message::error(id, "unknown_model", format!("no model named {model:?}"));
        };
        match loaded.forecaster.forecast(&history, horizon) {
            Ok(forecast) => Message::ForecastResp {
                id,
                forecast,
                model_version: loaded.version.clone(),
            },
            Err(e) => Message::error(id, e.code(), e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ServeMode {
    /// Accept client connections directly.
    Listen(String),
    /// Pull requests from `topic` on a broker and publish each reply to the
    /// request's reply topic.
    Broker {
        address: String,
        topic: String,
        workers: usize,
    },
}

const POLL: Duration = Duration::from_millis(100);

pub fn run_model_server(registry: Arc<ModelRegistry>, mode: ServeMode) -> io::Result<ServerHandle> {
    match mode {
        ServeMode::Listen(addr) => {
            let listener = TcpListener::bind(addr)?;
            serve(listener, move |msg| registry.answer(msg))
        }
        ServeMode::Broker {
            address,
            topic,
            workers,
        } => {
            // fail fast when the broker is unreachable
            TcpStream::connect(&address)?;
            let stop = Arc::new(AtomicBool::new(false));
            let threads = (0..workers.max(1))
                .map(|_| {
                    let (registry, stop) = (registry.clone(), stop.clone());
                    let (address, topic) = (address.clone(), topic.clone());
                    thread::spawn(move || {
                        while !stop.load(Ordering::SeqCst) {
                            if worker(&registry, &address, &topic, &stop).is_err() {
                                thread::sleep(POLL);
                            }
                        }
                    })
                })
                .collect();
            Ok(ServerHandle::new(None, stop, threads))
        }
    }
}

fn worker(registry: &ModelRegistry, address: &str, topic: &str, stop: &AtomicBool) -> io::Result<()> {
    let stream = TcpStream::connect(address)?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut call = |msg: Message| -> io::Result<Message> {
        write_frame(&mut writer, &msg).map_err(to_io)?;
        read_frame(&mut reader)
            .map_err(to_io)?
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))
    };
    let mut n = 0u64;
    while !stop.load(Ordering::SeqCst) {
        n += 1;
        let reply = call(Message::Fetch {
            id: format!("worker-{n}"),
            topic: topic.to_string(),
            timeout_ms: Some(POLL.as_millis() as u64),
            payload: None,
            empty: false,
        })?;
        let Message::Fetch {
            payload: Some(payload),
            ..
        } = reply
        else {
            continue;
        };
        let id = payload.get("id").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        let reply_to = payload
            .get("reply_topic")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| reply_topic(&id));
        let response = match Message::from_value(payload) {
            Ok(msg) => registry.answer(msg),
            Err(e) => Message::error(id.clone(), "malformed_frame", e.to_string()),
        };
        call(Message::Publish {
            id: format!("reply-{id}"),
            topic: reply_to,
            payload: response.to_value(),
        })?;
    }
    Ok(())
}

fn to_io(e: crate::frame::FrameError) -> io::Error {
    match e {
        crate::frame::FrameError::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use redf_core::lstm::HyperParams;
    use redf_core::numeric::Rng;

    fn registry() -> ModelRegistry {
        let hyper = HyperParams {
            units: 3,
            timesteps: 24,
            ..HyperParams::default()
        };
        let mut reg = ModelRegistry::new();
        reg.insert(
            "dayton",
            ModelParams::init(hyper, &mut Rng::new(2)),
            Scaler::minmax(1000.0, 3000.0).unwrap(),
            "dayton@test".into(),
        );
        reg
    }

    fn req(model: &str, history: Vec<f64>) -> Message {
        Message::ForecastReq {
            id: "r".into(),
            model: model.into(),
            horizon: 1,
            history,
            reply_topic: None,
        }
    }

    fn code(m: Message) -> String {
        match m {
            Message::Error { code, .. } => code,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_codes() {
        let reg = registry();
        assert_eq!(code(reg.answer(req("nope", vec![1.0; 24]))), "unknown_model");
        assert_eq!(code(reg.answer(req("dayton", vec![1.0; 3]))), "insufficient_history");
        let mut bad = vec![1500.0; 24];
        bad[5] = f64::NAN;
        assert_eq!(code(reg.answer(req("dayton", bad))), "invalid_values");
    }

    #[test]
    fn answer_matches_forecaster() {
        let reg = registry();
        let history: Vec<f64> = (0..30).map(|i| 1500.0 + 10.0 * i as f64).collect();
        let expected = reg.get("dayton").unwrap().forecaster.forecast(&history, 1).unwrap();
        match reg.answer(req("dayton", history)) {
            Message::ForecastResp {
                id,
                forecast,
                model_version,
            } => {
                assert_eq!(id, "r");
                assert_eq!(forecast, expected);
                assert_eq!(model_version, "dayton@test");
            }
            other => panic!("{other:?}"),
        }
    }
}
