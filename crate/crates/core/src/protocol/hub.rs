use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{Frame, ProtocolError};

pub type SubscriberId = u64;

/// What happens when a subscriber falls behind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueuePolicy {
    /// Never drop. For in-process consumers that keep up by construction.
    Unbounded,
    /// Keep at most this many queued messages per topic, dropping the
    /// oldest of that topic first.
    DropOldest(usize),
}

struct Subscriber {
    topics: HashSet<String>,
    queue: VecDeque<Arc<Frame>>,
    per_topic: HashMap<String, usize>,
    policy: QueuePolicy,
    dropped: u64,
    closed: bool,
}

impl Subscriber {
    fn push(&mut self, frame: Arc<Frame>) -> u64 {
        let mut dropped = 0;
        if let QueuePolicy::DropOldest(cap) = self.policy {
            let queued = self.per_topic.get(&frame.topic).copied().unwrap_or(0);
            if queued >= cap.max(1) {
                let oldest = self.queue.iter().position(|f| f.topic == frame.topic).expect("counted frame is queued");
                self.queue.remove(oldest);
                *self.per_topic.get_mut(&frame.topic).unwrap() -= 1;
                dropped = 1;
            }
        }
        *self.per_topic.entry(frame.topic.clone()).or_default() += 1;
        self.queue.push_back(frame);
        self.dropped += dropped;
        dropped
    }

    fn pop(&mut self) -> Option<Arc<Frame>> {
        let f = self.queue.pop_front()?;
        if let Some(n) = self.per_topic.get_mut(&f.topic) {
            *n -= 1;
        }
        Some(f)
    }
}

#[derive(Default)]
struct Inner {
    next_id: SubscriberId,
    subs: HashMap<SubscriberId, Subscriber>,
    /// Replayed to new subscribers of the topic.
    latched: HashMap<String, Vec<Arc<Frame>>>,
    dropped: u64,
}

/// Topic fan-out with one queue per subscriber.
///
/// Delivery to a subscriber follows publish order across all its topics;
/// the drop policy only ever removes messages, it never reorders them.
/// Subscribers never block publishers or each other.
#[derive(Default)]
pub struct Hub {
    inner: Mutex<Inner>,
    ready: Condvar,
}

impl Hub {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn add_subscriber(&self, policy: QueuePolicy) -> SubscriberId {
        let mut g = self.lock();
        let id = g.next_id;
        g.next_id += 1;
        g.subs.insert(
            id,
            Subscriber {
                topics: HashSet::new(),
                queue: VecDeque::new(),
                per_topic: HashMap::new(),
                policy,
                dropped: 0,
                closed: false,
            },
        );
        id
    }

    pub fn remove_subscriber(&self, id: SubscriberId) {
        self.lock().subs.remove(&id);
        self.ready.notify_all();
    }

    /// Stops delivery of new messages; already queued ones can still be
    /// received, after which `recv` reports [`ProtocolError::Closed`].
    pub fn close(&self, id: SubscriberId) {
        if let Some(s) = self.lock().subs.get_mut(&id) {
            s.closed = true;
            s.topics.clear();
        }
        self.ready.notify_all();
    }

    /// Adds `topic` and replays its latched messages.
    pub fn subscribe(&self, id: SubscriberId, topic: &str) {
        let mut g = self.lock();
        let latched = g.latched.get(topic).cloned().unwrap_or_default();
        let mut dropped = 0;
        if let Some(s) = g.subs.get_mut(&id).filter(|s| !s.closed) {
            if s.topics.insert(topic.to_string()) {
                for f in latched {
                    dropped += s.push(f);
                }
            }
        }
        g.dropped += dropped;
        drop(g);
        self.ready.notify_all();
    }

    /// Removes `topic` and discards its queued messages.
    pub fn unsubscribe(&self, id: SubscriberId, topic: &str) {
        if let Some(s) = self.lock().subs.get_mut(&id) {
            s.topics.remove(topic);
            s.queue.retain(|f| f.topic != topic);
            s.per_topic.remove(topic);
        }
    }

    /// Delivers to every subscriber of the frame's topic. Returns the number
    /// of recipients.
    pub fn publish(&self, frame: Frame) -> usize {
        let mut g = self.lock();
        let n = Self::fan_out(&mut g, Arc::new(frame));
        drop(g);
        self.ready.notify_all();
        n
    }

    /// Publishes and keeps the frame as the topic's latched value.
    pub fn publish_latched(&self, frame: Frame) -> usize {
        self.publish_latched_set(vec![frame])
    }

    /// Publishes a group of frames on one topic and latches the whole group,
    /// replacing the previous one.
    pub fn publish_latched_set(&self, frames: Vec<Frame>) -> usize {
        let Some(topic) = frames.first().map(|f| f.topic.clone()) else { return 0 };
        debug_assert!(frames.iter().all(|f| f.topic == topic));
        let frames: Vec<Arc<Frame>> = frames.into_iter().map(Arc::new).collect();
        let mut g = self.lock();
        g.latched.insert(topic, frames.clone());
        let mut n = 0;
        for f in frames {
            n = Self::fan_out(&mut g, f);
        }
        drop(g);
        self.ready.notify_all();
        n
    }

    fn fan_out(g: &mut Inner, frame: Arc<Frame>) -> usize {
        let mut n = 0;
        let mut dropped = 0;
        for s in g.subs.values_mut() {
            if !s.closed && s.topics.contains(&frame.topic) {
                dropped += s.push(frame.clone());
                n += 1;
            }
        }
        g.dropped += dropped;
        n
    }

    /// Queues a frame for one subscriber regardless of its topics.
    pub fn send_to(&self, id: SubscriberId, frame: Frame) {
        let mut g = self.lock();
        let mut dropped = 0;
        if let Some(s) = g.subs.get_mut(&id).filter(|s| !s.closed) {
            dropped = s.push(Arc::new(frame));
        }
        g.dropped += dropped;
        drop(g);
        self.ready.notify_all();
    }

    /// Next queued frame, waiting up to `timeout`. `Ok(None)` on timeout.
    pub fn recv(&self, id: SubscriberId, timeout: Duration) -> Result<Option<Arc<Frame>>, ProtocolError> {
        let deadline = Instant::now() + timeout;
        let mut g = self.lock();
        loop {
            let Some(s) = g.subs.get_mut(&id) else { return Err(ProtocolError::Closed) };
            if let Some(f) = s.pop() {
                return Ok(Some(f));
            }
            if s.closed {
                return Err(ProtocolError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            g = self.ready.wait_timeout(g, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
    }

    pub fn try_recv(&self, id: SubscriberId) -> Result<Option<Arc<Frame>>, ProtocolError> {
        self.recv(id, Duration::ZERO)
    }

    pub fn dropped(&self, id: SubscriberId) -> u64 {
        self.lock().subs.get(&id).map_or(0, |s| s.dropped)
    }

    /// Drops across all subscribers since the hub was created.
    pub fn dropped_total(&self) -> u64 {
        self.lock().dropped
    }

    pub fn subscriber_count(&self) -> usize {
        self.lock().subs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(topic: &str, i: u32) -> Frame {
        Frame::publish(topic, i.to_le_bytes().to_vec())
    }

    fn drain(hub: &Hub, id: SubscriberId) -> Vec<Arc<Frame>> {
        std::iter::from_fn(|| hub.try_recv(id).unwrap()).collect()
    }

    #[test]
    fn hundred_ordered_messages_arrive_intact() {
        let hub = Hub::new();
        let id = hub.add_subscriber(QueuePolicy::Unbounded);
        hub.subscribe(id, "/t");
        for i in 0..100 {
            hub.publish(msg("/t", i));
        }
        let got: Vec<_> = drain(&hub, id).iter().map(|f| f.payload.clone()).collect();
        assert_eq!(got, (0..100u32).map(|i| i.to_le_bytes().to_vec()).collect::<Vec<_>>());
        assert_eq!(hub.dropped(id), 0);
    }

    #[test]
    fn drop_oldest_is_per_topic() {
        let hub = Hub::new();
        let id = hub.add_subscriber(QueuePolicy::DropOldest(2));
        hub.subscribe(id, "/a");
        hub.subscribe(id, "/b");
        hub.publish(msg("/b", 0));
        for i in 0..5 {
            hub.publish(msg("/a", i));
        }
        let got: Vec<_> = drain(&hub, id).iter().map(|f| (f.topic.clone(), f.payload[0])).collect();
        assert_eq!(got, vec![("/b".into(), 0), ("/a".into(), 3), ("/a".into(), 4)]);
        assert_eq!((hub.dropped(id), hub.dropped_total()), (3, 3));
    }

    #[test]
    fn latched_values_replay_on_subscribe() {
        let hub = Hub::new();
        hub.publish_latched(msg("/phase", 1));
        hub.publish_latched(msg("/phase", 2));
        hub.publish_latched_set(vec![msg("/scene", 0), msg("/scene", 1)]);
        let id = hub.add_subscriber(QueuePolicy::Unbounded);
        hub.subscribe(id, "/phase");
        hub.subscribe(id, "/scene");
        hub.subscribe(id, "/phase");
        let got: Vec<_> = drain(&hub, id).iter().map(|f| (f.topic.clone(), f.payload[0])).collect();
        assert_eq!(got, vec![("/phase".into(), 2), ("/scene".into(), 0), ("/scene".into(), 1)]);
    }

    #[test]
    fn unsubscribe_and_close() {
        let hub = Hub::new();
        let id = hub.add_subscriber(QueuePolicy::Unbounded);
        hub.subscribe(id, "/a");
        hub.publish(msg("/a", 0));
        hub.unsubscribe(id, "/a");
        hub.publish(msg("/a", 1));
        assert_eq!(hub.try_recv(id).unwrap(), None);
        hub.send_to(id, Frame::pong());
        hub.close(id);
        assert_eq!(hub.try_recv(id).unwrap().unwrap().kind, super::super::Kind::Pong);
        assert_eq!(hub.try_recv(id), Err(ProtocolError::Closed));
        hub.remove_subscriber(id);
        assert_eq!(hub.subscriber_count(), 0);
    }

    #[test]
    fn two_subscribers_both_receive() {
        let hub = Hub::new();
        let ids = [hub.add_subscriber(QueuePolicy::Unbounded), hub.add_subscriber(QueuePolicy::DropOldest(64))];
        for id in ids {
            hub.subscribe(id, "/x");
        }
        assert_eq!(hub.publish(msg("/x", 9)), 2);
        for id in ids {
            assert_eq!(drain(&hub, id).len(), 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Four concurrent consumers; every per-topic stream received is an
        /// in-order subsequence of the published one that keeps the newest
        /// message, and exactly equal without drops.
        #[test]
        fn per_topic_fifo_under_concurrency(schedule in prop::collection::vec((0usize..3, 0u64..50), 1..300), cap in 1usize..80) {
            let hub = Arc::new(Hub::new());
            let topics = ["/a", "/b", "/c"];
            let policies = [QueuePolicy::Unbounded, QueuePolicy::DropOldest(cap), QueuePolicy::Unbounded, QueuePolicy::DropOldest(cap)];
            let ids: Vec<_> = policies.iter().map(|&p| {
                let id = hub.add_subscriber(p);
                for t in topics {
                    hub.subscribe(id, t);
                }
                id
            }).collect();
            let consumers: Vec<_> = ids.iter().map(|&id| {
                let hub = hub.clone();
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Ok(f) = hub.recv(id, Duration::from_secs(10)) {
                        match f {
                            Some(f) => got.push(f),
                            None => break,
                        }
                    }
                    got
                })
            }).collect();
            let mut published: [Vec<u32>; 3] = Default::default();
            for (seq, (t, spin)) in schedule.iter().enumerate() {
                published[*t].push(seq as u32);
                hub.publish(msg(topics[*t], seq as u32));
                for _ in 0..*spin {
                    std::hint::spin_loop();
                }
            }
            for &id in &ids {
                hub.close(id);
            }
            for (k, c) in consumers.into_iter().enumerate() {
                let got = c.join().unwrap();
                for (t, topic) in topics.iter().enumerate() {
                    let seqs: Vec<u32> = got.iter().filter(|f| f.topic == *topic)
                        .map(|f| u32::from_le_bytes(f.payload[..4].try_into().unwrap())).collect();
                    let mut it = published[t].iter();
                    prop_assert!(seqs.iter().all(|s| it.any(|p| p == s)), "not an in-order subsequence");
                    prop_assert_eq!(seqs.last(), published[t].last());
                    if policies[k] == QueuePolicy::Unbounded {
                        prop_assert_eq!(&seqs, &published[t]);
                    }
                }
                let total: usize = published.iter().map(Vec::len).sum();
                prop_assert_eq!(got.len() as u64 + hub.dropped(ids[k]), total as u64);
            }
        }
    }
}
