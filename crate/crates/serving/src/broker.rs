//! In-memory publish/subscribe broker with one FIFO queue per topic.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::net::TcpListener;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::frame::Message;
use crate::net::{serve, ServerHandle};

#[derive(Debug, Default)]
pub struct Broker {
    queues: Mutex<HashMap<String, VecDeque<Value>>>,
    published: Condvar,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, topic: &str, payload: Value) {
        let mut queues = self.queues.lock().unwrap();
        queues.entry(topic.to_string()).or_default().push_back(payload);
        self.published.notify_all();
    }

    /// Pop the oldest payload, waiting up to `timeout` for one to arrive.
    pub fn fetch(&self, topic: &str, timeout: Duration) -> Option<Value> {
        let deadline = Instant::now() + timeout;
        let mut queues = self.queues.lock().unwrap();
        loop {
            if let Some(v) = queues.get_mut(topic).and_then(VecDeque::pop_front) {
                return Some(v);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            queues = self.published.wait_timeout(queues, deadline - now).unwrap().0;
        }
    }

    pub fn depth(&self, topic: &str) -> usize {
        self.queues.lock().unwrap().get(topic).map_or(0, VecDeque::len)
    }

    pub fn handle(&self, msg: Message) -> Message {
        match msg {
            Message::Publish { id, topic, payload } => {
                self.publish(&topic, payload);
                Message::Publish {
                    id,
                    topic,
                    payload: Value::Null,
                }
            }
            Message::Fetch {
                id,
                topic,
                timeout_ms,
                ..
            } => {
                let payload = self.fetch(&topic, Duration::from_millis(timeout_ms.unwrap_or(0)));
                Message::Fetch {
                    id,
                    topic,
                    timeout_ms: None,
                    empty: payload.is_none(),
                    payload,
                }
            }
            other => Message::error(other.id(), "unsupported_type", "the broker accepts PUBLISH and FETCH"),
        }
    }
}

/// Bind `address` and serve the broker protocol until shut down.
pub fn run_broker(address: &str) -> io::Result<(ServerHandle, Arc<Broker>)> {
    let listener = TcpListener::bind(address)?;
    let broker = Arc::new(Broker::new());
    let shared = broker.clone();
    let handle = serve(listener, move |msg| shared.handle(msg))?;
    Ok((handle, broker))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fifo_per_topic() {
        let b = Broker::new();
        b.publish("t", json!("a"));
        b.publish("u", json!("x"));
        b.publish("t", json!("b"));
        assert_eq!(b.fetch("t", Duration::ZERO), Some(json!("a")));
        assert_eq!(b.fetch("t", Duration::ZERO), Some(json!("b")));
        assert_eq!(b.fetch("t", Duration::ZERO), None);
        assert_eq!(b.fetch("u", Duration::ZERO), Some(json!("x")));
    }

    #[test]
    fn empty_fetch_waits_for_timeout() {
        let b = Broker::new();
        let t = Instant::now();
        assert_eq!(b.fetch("none", Duration::from_millis(50)), None);
        let waited = t.elapsed();
        assert!(waited >= Duration::from_millis(50), "{waited:?}");
        assert!(waited <= Duration::from_millis(70), "{waited:?}");
    }

    #[test]
    fn blocked_fetch_wakes_on_publish() {
        let b = Arc::new(Broker::new());
        let c = b.clone();
        let waiter = std::thread::spawn(move || c.fetch("t", Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(20));
        b.publish("t", json!(1));
        assert_eq!(waiter.join().unwrap(), Some(json!(1)));
    }

    #[test]
    fn protocol_replies() {
        let b = Broker::new();
        let ack = b.handle(Message::Publish {
            id: "p".into(),
            topic: "t".into(),
            payload: json!({"k": 1}),
        });
        assert_eq!(ack.id(), "p");
        let fetch = |id: &str| Message::Fetch {
            id: id.into(),
            topic: "t".into(),
            timeout_ms: Some(0),
            payload: None,
            empty: false,
        };
        match b.handle(fetch("f1")) {
            Message::Fetch { payload, empty, .. } => {
                assert_eq!(payload, Some(json!({"k": 1})));
                assert!(!empty);
            }
            other => panic!("{other:?}"),
        }
        match b.handle(fetch("f2")) {
            Message::Fetch { payload, empty, .. } => assert!(payload.is_none() && empty),
            other => panic!("{other:?}"),
        }
    }
}
