//! Topic registry and fan-out.
//!
//! The broker is a plain state machine: it decides who receives a frame and
//! hands back the encoded bytes once. Transport code owns the sockets and
//! reports dead clients back through [`Broker::deliver`] or
//! [`Broker::remove_client`].

use super::codec::{encode_frame_str, CodecError};
use super::frame::{BridgeFrame, Op, Topic};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

pub type ClientId = u64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BrokerError {
    #[error("client {0} is not connected")]
    UnknownClient(ClientId),
    #[error("seq {seq} from client {client} on {topic} does not follow {last}")]
    SeqRegression { client: ClientId, topic: Topic, seq: u64, last: u64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Outcome of dispatching one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Delivery {
    /// Recipients in subscription order.
    pub recipients: Vec<ClientId>,
    /// Canonical bytes shared by every recipient.
    pub bytes: Option<Arc<str>>,
    /// Direct answer to the sender (pong for ping).
    pub reply: Option<BridgeFrame>,
}

#[derive(Debug, Default)]
pub struct Broker {
    clients: BTreeSet<ClientId>,
    subscriptions: BTreeMap<Topic, Vec<ClientId>>,
    advertised: BTreeMap<Topic, Vec<ClientId>>,
    last_seq: HashMap<(ClientId, Topic), u64>,
    next_id: ClientId,
    delivered: u64,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn connect(&mut self) -> ClientId {
        let id = self.next_id;
        self.next_id += 1;
        self.clients.insert(id);
        id
    }

    pub fn is_connected(&self, id: ClientId) -> bool {
        self.clients.contains(&id)
    }

    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn subscribers(&self, topic: Topic) -> &[ClientId] {
        self.subscriptions.get(&topic).map_or(&[], Vec::as_slice)
    }

    pub fn publishers(&self, topic: Topic) -> &[ClientId] {
        self.advertised.get(&topic).map_or(&[], Vec::as_slice)
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    /// Forgets a client and all of its subscriptions and advertisements.
    pub fn remove_client(&mut self, id: ClientId) -> bool {
        for list in self.subscriptions.values_mut().chain(self.advertised.values_mut()) {
            list.retain(|c| *c != id);
        }
        self.last_seq.retain(|(c, _), _| *c != id);
        self.clients.remove(&id)
    }

    pub fn dispatch(&mut self, from: ClientId, frame: &BridgeFrame) -> Result<Delivery, BrokerError> {
        if !self.clients.contains(&from) {
            return Err(BrokerError::UnknownClient(from));
        }
        let mut out = Delivery::default();
        match (frame.op, frame.topic) {
            (Op::Ping, _) => {
                out.reply = Some(BridgeFrame { op: Op::Pong, ..*frame });
            }
            (Op::Pong, _) => {}
            (Op::Subscribe, Some(t)) => add_unique(self.subscriptions.entry(t).or_default(), from),
            (Op::Unsubscribe, Some(t)) => {
                if let Some(list) = self.subscriptions.get_mut(&t) {
                    list.retain(|c| *c != from);
                }
            }
            (Op::Advertise, Some(t)) => add_unique(self.advertised.entry(t).or_default(), from),
            (Op::Publish, Some(t)) => {
                if let Some(&last) = self.last_seq.get(&(from, t)) {
                    if frame.seq <= last {
                        return Err(BrokerError::SeqRegression { client: from, topic: t, seq: frame.seq, last });
                    }
                }
                let bytes: Arc<str> = encode_frame_str(frame)?.into();
                self.last_seq.insert((from, t), frame.seq);
                add_unique(self.advertised.entry(t).or_default(), from);
                out.recipients = self.subscribers(t).to_vec();
                out.bytes = Some(bytes);
            }
            (_, None) => {
                frame.check_schema().map_err(CodecError::Invalid)?;
            }
        }
        Ok(out)
    }

    /// Hands `delivery` to `send` for each recipient. Recipients whose send
    /// fails are removed; their ids are returned.
    pub fn deliver<F>(&mut self, delivery: &Delivery, mut send: F) -> Vec<ClientId>
    where
        F: FnMut(ClientId, &Arc<str>) -> bool,
    {
        let Some(bytes) = &delivery.bytes else {
            return Vec::new();
        };
        let mut dead = Vec::new();
        for &id in &delivery.recipients {
            if send(id, bytes) {
                self.delivered += 1;
            } else {
                dead.push(id);
            }
        }
        for id in &dead {
            self.remove_client(*id);
        }
        dead
    }
}

fn add_unique(list: &mut Vec<ClientId>, id: ClientId) {
    if !list.contains(&id) {
        list.push(id);
    }
}
