//! Wire messages and the per-connection session state machine, independent
//! of any transport.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::closed_loop::{LoopConfig, SessionState};
use crate::dataset::BIN_MS;
use crate::error::Result;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    Hello { version: u32 },
    Vel { vx: f64, vy: f64 },
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMessage {
    Ready {
        neurons: usize,
        bin_ms: u32,
    },
    Spikes {
        bin: u64,
        counts: Vec<u32>,
        #[serde(default, skip_serializing_if = "is_zero")]
        dropped: u64,
    },
    Arm {
        bin: u64,
        x: f64,
        y: f64,
        angles: Vec<f64>,
        #[serde(default, skip_serializing_if = "is_zero")]
        dropped: u64,
    },
    Error {
        msg: String,
    },
}

impl ServerMessage {
    pub fn error(msg: impl Into<String>) -> Self {
        ServerMessage::Error { msg: msg.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }

    fn set_dropped(&mut self, n: u64) {
        match self {
            ServerMessage::Spikes { dropped, .. } | ServerMessage::Arm { dropped, .. } => *dropped = n,
            _ => {}
        }
    }
}

/// What the transport should do after feeding the session one event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Reply {
    pub frames: Vec<ServerMessage>,
    pub close: bool,
}

impl Reply {
    fn frames(frames: Vec<ServerMessage>) -> Self {
        Reply { frames, close: false }
    }

    fn close_with(msg: String) -> Self {
        Reply {
            frames: vec![ServerMessage::error(msg)],
            close: true,
        }
    }
}

/// One connection: waits for `hello`, then advances the loop one bin per
/// `vel` (or per idle tick, at zero velocity).
#[derive(Debug)]
pub struct ServiceSession {
    id: u64,
    config: Arc<LoopConfig>,
    state: Option<SessionState>,
}

impl ServiceSession {
    pub fn new(id: u64, config: Arc<LoopConfig>) -> Self {
        ServiceSession { id, config, state: None }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_ready(&self) -> bool {
        self.state.is_some()
    }

    /// Next bin index to be emitted.
    pub fn bin(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.bin())
    }

    pub fn handle_text(&mut self, text: &str) -> Reply {
        let msg: ClientMessage = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return Reply::frames(vec![ServerMessage::error(format!("malformed message: {e}"))]),
        };
        match (msg, self.state.is_some()) {
            (ClientMessage::Hello { version }, false) => {
                if version != PROTOCOL_VERSION {
                    return Reply::close_with(format!("unsupported protocol version {version}"));
                }
                match SessionState::new(&self.config) {
                    Ok(state) => {
                        self.state = Some(state);
                        Reply::frames(vec![ServerMessage::Ready {
                            neurons: self.config.encoder.neurons(),
                            bin_ms: BIN_MS,
                        }])
                    }
                    Err(e) => Reply::close_with(format!("session setup failed: {e}")),
                }
            }
            (ClientMessage::Hello { .. }, true) => Reply::frames(vec![ServerMessage::error("duplicate hello")]),
            (ClientMessage::Vel { .. }, false) => Reply::close_with("expected hello first".into()),
            (ClientMessage::Vel { vx, vy }, true) => self.advance([vx, vy]),
        }
    }

    /// A bin period passed without input: advance at zero velocity.
    pub fn idle_tick(&mut self) -> Reply {
        if self.state.is_none() {
            return Reply::default();
        }
        self.advance([0.0, 0.0])
    }

    fn advance(&mut self, v: [f64; 2]) -> Reply {
        if v.iter().any(|x| !x.is_finite()) {
            return Reply::frames(vec![ServerMessage::error("velocity must be finite")]);
        }
        let state = self.state.as_mut().expect("checked by caller");
        match state.step_live(&self.config, v) {
            Ok(step) => Reply::frames(vec![
                ServerMessage::Spikes {
                    bin: step.bin,
                    counts: step.counts,
                    dropped: 0,
                },
                ServerMessage::Arm {
                    bin: step.bin,
                    x: step.position[0],
                    y: step.position[1],
                    angles: step.angles.to_vec(),
                    dropped: 0,
                },
            ]),
            Err(e) => Reply::frames(vec![ServerMessage::error(e.to_string())]),
        }
    }
}

/// Bounded egress buffer. When full the oldest frame is discarded; data
/// frames leaving the queue carry the running count of discarded frames.
#[derive(Debug)]
pub struct FrameQueue {
    frames: VecDeque<ServerMessage>,
    capacity: usize,
    dropped: u64,
}

impl FrameQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "frame queue capacity must be positive");
        FrameQueue {
            frames: VecDeque::with_capacity(capacity),
            capacity,
            dropped: 0,
        }
    }

    pub fn push(&mut self, frame: ServerMessage) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
            self.dropped += 1;
        }
        self.frames.push_back(frame);
    }

    pub fn pop(&mut self) -> Option<ServerMessage> {
        let mut f = self.frames.pop_front()?;
        f.set_dropped(self.dropped);
        Some(f)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

pub fn parse_client(text: &str) -> Result<ClientMessage, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderConfig, DecoderModel};
    use crate::encoder::{tests::tiny_config, EncoderModel};
    use crate::kinematics::KinematicChain;

    fn session() -> ServiceSession {
        let enc = EncoderModel::new(tiny_config()).unwrap();
        let dec = DecoderModel::new(
            DecoderConfig {
                window_bins: 4,
                hidden_sizes: vec![5],
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let cfg = LoopConfig::new(Arc::new(dec), Arc::new(enc), Arc::new(KinematicChain::desk_arm())).unwrap();
        ServiceSession::new(7, Arc::new(cfg))
    }

    #[test]
    fn wire_shapes() {
        assert_eq!(parse_client(r#"{"type":"hello","version":1}"#).unwrap(), ClientMessage::Hello { version: 1 });
        assert_eq!(
            parse_client(r#"{"type":"vel","vx":1.5,"vy":-2}"#).unwrap(),
            ClientMessage::Vel { vx: 1.5, vy: -2.0 }
        );
        assert!(parse_client(r#"{"type":"jump"}"#).is_err());
        assert!(parse_client(r#"{"type":"vel","vx":NaN,"vy":0}"#).is_err());
        let s = ServerMessage::Spikes { bin: 3, counts: vec![1, 0], dropped: 0 }.to_json();
        assert_eq!(s, r#"{"type":"spikes","bin":3,"counts":[1,0]}"#);
        let r = ServerMessage::Ready { neurons: 192, bin_ms: 20 }.to_json();
        assert_eq!(r, r#"{"type":"ready","neurons":192,"bin_ms":20}"#);
        assert_eq!(ServerMessage::error("x").to_json(), r#"{"type":"error","msg":"x"}"#);
    }

    #[test]
    fn vel_before_hello_closes() {
        let mut s = session();
        let r = s.handle_text(r#"{"type":"vel","vx":0,"vy":0}"#);
        assert!(r.close);
        assert!(matches!(r.frames[0], ServerMessage::Error { .. }));
    }

    #[test]
    fn one_vel_one_pair() {
        let mut s = session();
        let r = s.handle_text(r#"{"type":"hello","version":1}"#);
        assert_eq!(r.frames, vec![ServerMessage::Ready { neurons: 4, bin_ms: 20 }]);
        for bin in 0..5 {
            let r = s.handle_text(r#"{"type":"vel","vx":50,"vy":0}"#);
            assert!(!r.close);
            assert_eq!(r.frames.len(), 2);
            match (&r.frames[0], &r.frames[1]) {
                (ServerMessage::Spikes { bin: a, counts, .. }, ServerMessage::Arm { bin: b, angles, .. }) => {
                    assert_eq!((*a, *b), (bin, bin));
                    assert_eq!(counts.len(), 4);
                    assert_eq!(angles.len(), 6);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn bad_input_keeps_session_open() {
        let mut s = session();
        s.handle_text(r#"{"type":"hello","version":1}"#);
        for bad in ["{", r#"{"type":"warp"}"#, r#"{"type":"vel","vx":"a","vy":0}"#, r#"{"type":"vel","vx":1e999,"vy":0}"#] {
            let r = s.handle_text(bad);
            assert!(!r.close, "{bad}");
            assert!(matches!(r.frames.as_slice(), [ServerMessage::Error { .. }]), "{bad}");
        }
        assert_eq!(s.bin(), 0);
    }

    #[test]
    fn idle_decays_toward_anchor() {
        let mut s = session();
        assert_eq!(s.idle_tick(), Reply::default());
        let mut dec = (*s.config.decoder).clone();
        for layer in dec.layers_mut() {
            layer.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let mut cfg = (*s.config).clone();
        cfg.decoder = Arc::new(dec);
        s.config = Arc::new(cfg);
        s.handle_text(r#"{"type":"hello","version":1}"#);
        let anchor = s.config.anchor;
        s.state.as_mut().unwrap().arm_mut().position = [anchor[0] + 40.0, anchor[1]];
        let mut expected = 40.0;
        for bin in 0..30 {
            expected *= 0.95;
            match s.idle_tick().frames.as_slice() {
                [ServerMessage::Spikes { .. }, ServerMessage::Arm { bin: b, x, y, .. }] => {
                    assert_eq!(*b, bin);
                    assert!((x - anchor[0] - expected).abs() < 0.01, "bin {bin}: {x}");
                    assert!(y.abs() < 0.01);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn queue_drops_oldest_and_counts() {
        let mut q = FrameQueue::new(2);
        for bin in 0..5 {
            q.push(ServerMessage::Spikes { bin, counts: vec![], dropped: 0 });
        }
        assert_eq!(q.dropped(), 3);
        match q.pop().unwrap() {
            ServerMessage::Spikes { bin, dropped, .. } => assert_eq!((bin, dropped), (3, 3)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(q.pop(), Some(ServerMessage::Spikes { bin: 4, .. })));
        assert!(q.pop().is_none());
    }
}
