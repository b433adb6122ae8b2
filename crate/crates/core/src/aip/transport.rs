//! Frame transport abstraction. The in-memory pair is the default backend;
//! the simulated network drives nodes directly and does not need one.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transport is disconnected")]
    Disconnected,
}

pub trait Transport {
    fn send(&mut self, frame: Vec<u8>) -> Result<(), TransportError>;
    /// Next inbound frame, if one is waiting.
    fn recv(&mut self) -> Option<Vec<u8>>;
    fn is_connected(&self) -> bool;
}

#[derive(Debug, Default)]
struct Shared {
    a_to_b: VecDeque<Vec<u8>>,
    b_to_a: VecDeque<Vec<u8>>,
    connected: bool,
}

/// One end of an in-process duplex channel.
#[derive(Debug, Clone)]
pub struct MemoryTransport {
    shared: Rc<RefCell<Shared>>,
    is_a: bool,
}

/// Two connected ends; frames sent on one arrive, in order, on the other.
pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    let shared = Rc::new(RefCell::new(Shared {
        connected: true,
        ..Default::default()
    }));
    (
        MemoryTransport {
            shared: shared.clone(),
            is_a: true,
        },
        MemoryTransport {
            shared,
            is_a: false,
        },
    )
}

impl MemoryTransport {
    /// Drops the connection for both ends and discards undelivered frames.
    pub fn disconnect(&self) {
        let mut s = self.shared.borrow_mut();
        s.connected = false;
        s.a_to_b.clear();
        s.b_to_a.clear();
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, frame: Vec<u8>) -> Result<(), TransportError> {
        let mut s = self.shared.borrow_mut();
        if !s.connected {
            return Err(TransportError::Disconnected);
        }
        if self.is_a {
            s.a_to_b.push_back(frame);
        } else {
            s.b_to_a.push_back(frame);
        }
        Ok(())
    }

    fn recv(&mut self) -> Option<Vec<u8>> {
        let mut s = self.shared.borrow_mut();
        if self.is_a {
            s.b_to_a.pop_front()
        } else {
            s.a_to_b.pop_front()
        }
    }

    fn is_connected(&self) -> bool {
        self.shared.borrow().connected
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_flow_in_order_until_disconnect() {
        let (mut a, mut b) = memory_pair();
        a.send(vec![1]).unwrap();
        a.send(vec![2]).unwrap();
        assert_eq!(b.recv(), Some(vec![1]));
        assert_eq!(b.recv(), Some(vec![2]));
        b.send(vec![3]).unwrap();
        a.disconnect();
        assert_eq!(a.recv(), None);
        assert_eq!(b.send(vec![4]), Err(TransportError::Disconnected));
        assert!(!b.is_connected());
    }
}
