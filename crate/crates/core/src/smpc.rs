//! Additive secret sharing over Z/2^64 and a simulated n-party secure sum.
//!
//! Parties run in one process and talk through a round-based message queue.
//! Round one: every party splits its input into one share per party and sends
//! them out. Round two: every party adds up the shares it holds (a share of
//! the total) and broadcasts that partial sum. Anyone can then add the
//! partial sums to recover the total and nothing else.
//!
//! The adversary model is honest-but-curious.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meterdata::EnergyQuantity;

/// Largest encodable value plus one. Totals at or above this are overflow.
pub const HALF_MODULUS: u64 = 1 << 63;

pub const NOT_ENOUGH_PARTICIPANTS: &str = "not enough participants";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SmpcError {
    #[error("secret sharing needs at least 2 parties, got {0}")]
    InvalidPartyCount(usize),
    #[error("party {0} appears more than once")]
    DuplicateParty(PartyId),
    #[error("party {0} input is negative or too large to encode")]
    UnencodableInput(PartyId),
    #[error("sum {0} overflows the encoding range")]
    Overflow(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// One additive share, in transit from its origin to its holder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub value: u64,
    pub origin: PartyId,
    pub holder: PartyId,
}

/// Splits `secret` into one share per holder: all but the last are uniform in
/// [0, 2^64) and the last makes the total congruent to `secret`.
pub fn share<R: RngCore + ?Sized>(
    secret: u64,
    origin: PartyId,
    holders: &[PartyId],
    rng: &mut R,
) -> Result<Vec<Share>, SmpcError> {
    let n = holders.len();
    if n < 2 {
        return Err(SmpcError::InvalidPartyCount(n));
    }
    let mut shares = Vec::with_capacity(n);
    let mut acc = 0u64;
    for &holder in &holders[..n - 1] {
        let value = rng.next_u64();
        acc = acc.wrapping_add(value);
        shares.push(Share { value, origin, holder });
    }
    shares.push(Share { value: secret.wrapping_sub(acc), origin, holder: holders[n - 1] });
    Ok(shares)
}

/// Sum of share values mod 2^64.
pub fn reconstruct(shares: &[Share]) -> u64 {
    shares.iter().fold(0u64, |acc, s| acc.wrapping_add(s.value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartyInput {
    pub party_id: PartyId,
    pub secret: EnergyQuantity,
}

impl PartyInput {
    pub fn new(party_id: PartyId, secret: EnergyQuantity) -> Self {
        PartyInput { party_id, secret }
    }

    fn encode(&self) -> Result<u64, SmpcError> {
        u64::try_from(self.secret.milli_kwh())
            .ok()
            .filter(|&v| v < HALF_MODULUS)
            .ok_or(SmpcError::UnencodableInput(self.party_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    InputShare,
    PartialSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub round: u8,
    pub kind: MessageKind,
    pub share: Share,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolResult {
    Sum(u64),
    Abort(String),
}

/// Every message delivered during a run, in delivery order, plus the outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolTranscript {
    messages: Vec<Message>,
    result: Option<ProtocolResult>,
}

impl ProtocolTranscript {
    fn new() -> Self {
        ProtocolTranscript { messages: Vec::new(), result: None }
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn result(&self) -> Option<&ProtocolResult> {
        self.result.as_ref()
    }

    /// `from,to,value` rows, one per message.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("from,to,value\n");
        for m in &self.messages {
            out.push_str(&format!("{},{},{}\n", m.share.origin.0, m.share.holder.0, m.share.value));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SecureSumOutcome {
    Completed(EnergyQuantity),
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecureSumRun {
    pub outcome: SecureSumOutcome,
    pub transcript: ProtocolTranscript,
}

/// Round-synchronous message queue: sends are buffered and delivered together
/// at the end of the round.
struct Network<'t> {
    round: u8,
    outbox: Vec<Message>,
    transcript: &'t mut ProtocolTranscript,
}

impl<'t> Network<'t> {
    fn send(&mut self, kind: MessageKind, share: Share) {
        self.outbox.push(Message { round: self.round, kind, share });
    }

    fn deliver(&mut self) -> Vec<Message> {
        let delivered = std::mem::take(&mut self.outbox);
        self.transcript.messages.extend_from_slice(&delivered);
        self.round += 1;
        delivered
    }
}

/// Secure sum of the parties' inputs, aborting before any message is sent
/// when fewer than `min_participants` parties take part.
pub fn secure_sum<R: RngCore + ?Sized>(
    inputs: &[PartyInput],
    min_participants: usize,
    rng: &mut R,
) -> Result<SecureSumRun, SmpcError> {
    let mut seen = BTreeSet::new();
    for input in inputs {
        if !seen.insert(input.party_id) {
            return Err(SmpcError::DuplicateParty(input.party_id));
        }
    }
    let mut transcript = ProtocolTranscript::new();
    if inputs.len() < min_participants {
        transcript.result = Some(ProtocolResult::Abort(NOT_ENOUGH_PARTICIPANTS.into()));
        return Ok(SecureSumRun {
            outcome: SecureSumOutcome::Aborted(NOT_ENOUGH_PARTICIPANTS.into()),
            transcript,
        });
    }
    if inputs.len() < 2 {
        return Err(SmpcError::InvalidPartyCount(inputs.len()));
    }
    let secrets = inputs.iter().map(PartyInput::encode).collect::<Result<Vec<_>, _>>()?;
    let parties: Vec<PartyId> = inputs.iter().map(|i| i.party_id).collect();

    let total = {
        let mut net = Network { round: 1, outbox: Vec::new(), transcript: &mut transcript };

        for (&origin, &secret) in parties.iter().zip(&secrets) {
            for s in share(secret, origin, &parties, rng)? {
                net.send(MessageKind::InputShare, s);
            }
        }
        let round_one = net.deliver();

        for &holder in &parties {
            let partial = round_one
                .iter()
                .filter(|m| m.share.holder == holder)
                .fold(0u64, |acc, m| acc.wrapping_add(m.share.value));
            for &peer in &parties {
                net.send(MessageKind::PartialSum, Share { value: partial, origin: holder, holder: peer });
            }
        }
        let round_two = net.deliver();

        // Every party sees the same broadcast; read party 0's view.
        let view: Vec<Share> = round_two
            .iter()
            .filter(|m| m.share.holder == parties[0])
            .map(|m| m.share)
            .collect();
        reconstruct(&view)
    };

    transcript.result = Some(ProtocolResult::Sum(total));
    if total >= HALF_MODULUS {
        return Err(SmpcError::Overflow(total));
    }
    Ok(SecureSumRun {
        outcome: SecureSumOutcome::Completed(EnergyQuantity::from_milli_kwh(total as i64)),
        transcript,
    })
}
