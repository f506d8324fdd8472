//! In-process topic-based publish/subscribe broker.
//!
//! Mirrors the broker semantics the controllers rely on: topic filtering,
//! a retained value per topic (latest delivered payload, released
//! immediately to new subscribers), delivery-delay injection, and
//! message/energy accounting. Everything runs on simulated time; there is
//! no wire protocol.
//!
//! Topic names follow the `voltageBus{N}` / `energyBus{N}` convention.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

pub type ClientId = usize;

/// Radio energy per transmission: `e = v·i·t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxEnergyModel {
    pub voltage: f64,
    pub current: f64,
    pub tx_duration: f64,
}

impl Default for TxEnergyModel {
    fn default() -> Self {
        Self { voltage: 3.3, current: 0.05, tx_duration: 0.01 }
    }
}

impl TxEnergyModel {
    pub fn joules_per_message(&self) -> f64 {
        self.voltage * self.current * self.tx_duration
    }
}

/// A delivered message.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub client: ClientId,
    pub topic: String,
    pub payload: f64,
    pub publish_time: f64,
    pub deliver_time: f64,
    pub sequence: u64,
}

/// In-flight publish: payload plus the subscriber set snapshotted at
/// publish time.
#[derive(Debug, Clone)]
struct InFlight {
    deliver_time: f64,
    sequence: u64,
    publish_time: f64,
    topic: String,
    payload: f64,
    recipients: Vec<ClientId>,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.sequence == other.sequence
    }
}
impl Eq for InFlight {}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        other
            .deliver_time
            .total_cmp(&self.deliver_time)
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}
impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default)]
struct Counters {
    /// Transmissions per client (one per publish call, batches count once).
    client_tx: BTreeMap<ClientId, u64>,
    /// Publishes per topic.
    topic_pub: BTreeMap<String, u64>,
    /// Queue deliveries (excludes retained releases).
    delivered: u64,
    /// Expected deliveries: Σ over publishes of subscriber count.
    expected_deliveries: u64,
    /// Retained values released on subscribe.
    retained_releases: u64,
    total_tx: u64,
}

/// Topic registry, retained values, delayed in-flight messages and
/// accounting counters.
#[derive(Debug, Clone)]
pub struct Broker {
    subscriptions: BTreeMap<String, BTreeSet<ClientId>>,
    retained: BTreeMap<String, (u64, f64)>,
    in_flight: BinaryHeap<InFlight>,
    next_sequence: u64,
    counters: Counters,
    energy: TxEnergyModel,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(TxEnergyModel::default())
    }
}

impl Broker {
    pub fn new(energy: TxEnergyModel) -> Self {
        Self {
            subscriptions: BTreeMap::new(),
            retained: BTreeMap::new(),
            in_flight: BinaryHeap::new(),
            next_sequence: 0,
            counters: Counters::default(),
            energy,
        }
    }

    /// Registers a subscription (idempotent). If the topic holds a
    /// retained value it is returned for immediate delivery.
    pub fn subscribe(&mut self, client: ClientId, topic: &str) -> Option<f64> {
        self.subscriptions.entry(topic.to_string()).or_default().insert(client);
        let retained = self.retained.get(topic).map(|&(_, payload)| payload);
        if retained.is_some() {
            self.counters.retained_releases += 1;
        }
        retained
    }

    /// Publishes one value on one topic; counts as one transmission.
    pub fn publish(
        &mut self,
        client: ClientId,
        topic: &str,
        payload: f64,
        now: f64,
        delay: f64,
    ) -> u64 {
        debug_assert!(delay >= 0.0);
        self.counters.total_tx += 1;
        *self.counters.client_tx.entry(client).or_insert(0) += 1;
        let seq = self.enqueue(topic, payload, now, delay);
        seq
    }

    /// Publishes several topic/value pairs as a single radio transmission
    /// (counts once toward the energy model), as the time-triggered
    /// baseline does when it sends both sensor readings in one packet.
    pub fn publish_batch(
        &mut self,
        client: ClientId,
        entries: &[(&str, f64)],
        now: f64,
        delay: f64,
    ) -> u64 {
        debug_assert!(delay >= 0.0);
        self.counters.total_tx += 1;
        *self.counters.client_tx.entry(client).or_insert(0) += 1;
        let mut first = self.next_sequence;
        for (k, (topic, payload)) in entries.iter().enumerate() {
            let seq = self.enqueue(topic, *payload, now, delay);
            if k == 0 {
                first = seq;
            }
        }
        first
    }

    fn enqueue(&mut self, topic: &str, payload: f64, now: f64, delay: f64) -> u64 {
        let seq = self.next_sequence;
        self.next_sequence += 1;
        *self.counters.topic_pub.entry(topic.to_string()).or_insert(0) += 1;
        let recipients: Vec<ClientId> = self
            .subscriptions
            .get(topic)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        self.counters.expected_deliveries += recipients.len() as u64;
        self.in_flight.push(InFlight {
            deliver_time: now + delay,
            sequence: seq,
            publish_time: now,
            topic: topic.to_string(),
            payload,
            recipients,
        });
        seq
    }

    /// Returns and removes every message due at `now`, ordered by
    /// `(deliver_time, sequence)`; retained values update as each publish
    /// is delivered.
    pub fn drain(&mut self, now: f64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(top) = self.in_flight.peek() {
            if top.deliver_time > now {
                break;
            }
            let msg = self.in_flight.pop().expect("peeked");
            let keep = match self.retained.get(&msg.topic) {
                Some(&(seq, _)) => msg.sequence > seq,
                None => true,
            };
            if keep {
                self.retained.insert(msg.topic.clone(), (msg.sequence, msg.payload));
            }
            for client in &msg.recipients {
                self.counters.delivered += 1;
                out.push(Delivery {
                    client: *client,
                    topic: msg.topic.clone(),
                    payload: msg.payload,
                    publish_time: msg.publish_time,
                    deliver_time: msg.deliver_time,
                    sequence: msg.sequence,
                });
            }
        }
        out
    }

    /// Total communication energy [Wh]: transmissions × v·i·t.
    pub fn comms_energy_wh(&self) -> f64 {
        self.counters.total_tx as f64 * self.energy.joules_per_message() / 3600.0
    }

    pub fn total_transmissions(&self) -> u64 {
        self.counters.total_tx
    }

    pub fn client_transmissions(&self, client: ClientId) -> u64 {
        self.counters.client_tx.get(&client).copied().unwrap_or(0)
    }

    pub fn topic_publishes(&self, topic: &str) -> u64 {
        self.counters.topic_pub.get(topic).copied().unwrap_or(0)
    }

    pub fn delivered_count(&self) -> u64 {
        self.counters.delivered
    }

    pub fn expected_deliveries(&self) -> u64 {
        self.counters.expected_deliveries
    }

    pub fn retained(&self, topic: &str) -> Option<f64> {
        self.retained.get(topic).map(|&(_, p)| p)
    }

    pub fn in_flight_len(&self) -> usize {
        self.in_flight.len()
    }

    pub fn energy_model(&self) -> &TxEnergyModel {
        &self.energy
    }
}

/// Case-study topic names.
pub fn voltage_topic(bus_number: usize) -> String {
    format!("voltageBus{bus_number}")
}

/// Case-study topic names.
pub fn energy_topic(bus_number: usize) -> String {
    format!("energyBus{bus_number}")
}
