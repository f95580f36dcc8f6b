//! Charging provider: accounts, revenue-share distribution, and settlement.
//!
//! Every business event is a set of postings that sum to zero, double-entry
//! style, so money is conserved by construction. A redeemed ticket debits
//! the client account and credits each party of the revenue-share agreement;
//! the provider's own account absorbs the integer remainder of the split.
//! Charges are idempotent per ticket reference: re-settling the same ticket
//! changes nothing.

use std::collections::BTreeMap;

use num_rational::Rational64;
use thiserror::Error;

use crate::crypto::Digest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChargingError {
    #[error("revenue-share weights must be non-negative and sum to one")]
    BadAgreement,
    #[error("unknown account {0}")]
    UnknownAccount(String),
}

/// When the charge is initiated relative to service delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChargeMode {
    /// Settled before the ticket is handed out (prepaid).
    Pre,
    /// Settled on redemption report (postpaid).
    Post,
}

impl ChargeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ChargeMode::Pre => "PRE",
            ChargeMode::Post => "POST",
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            ChargeMode::Pre => 1,
            ChargeMode::Post => 2,
        }
    }

    pub fn from_u8(value: u8) -> Option<ChargeMode> {
        match value {
            1 => Some(ChargeMode::Pre),
            2 => Some(ChargeMode::Post),
            _ => None,
        }
    }
}

/// Revenue-share weights per account name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Agreement {
    weights: BTreeMap<String, Rational64>,
}

impl Agreement {
    pub fn new(weights: BTreeMap<String, Rational64>) -> Result<Self, ChargingError> {
        let mut total = Rational64::from_integer(0);
        for w in weights.values() {
            if *w < Rational64::from_integer(0) {
                return Err(ChargingError::BadAgreement);
            }
            total += w;
        }
        if total != Rational64::from_integer(1) {
            return Err(ChargingError::BadAgreement);
        }
        Ok(Agreement { weights })
    }

    pub fn weights(&self) -> &BTreeMap<String, Rational64> {
        &self.weights
    }
}

/// Splits `amount` among the agreement parties. Every party except
/// `remainder_to` receives the floor of its exact share; `remainder_to`
/// receives whatever is left, so the shares always sum to `amount`.
pub fn distribute(
    amount: i64,
    agreement: &Agreement,
    remainder_to: &str,
) -> BTreeMap<String, i64> {
    let mut shares = BTreeMap::new();
    let mut assigned: i64 = 0;
    for (party, weight) in &agreement.weights {
        if party == remainder_to {
            continue;
        }
        let share = (Rational64::from_integer(amount) * weight).floor().to_integer();
        assigned += share;
        shares.insert(party.clone(), share);
    }
    shares.insert(remainder_to.to_string(), amount - assigned);
    shares
}

/// One account movement. A business event's postings sum to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Posting {
    pub account: String,
    pub delta: i64,
    pub memo: String,
}

/// Settled charge for one ticket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChargeRecord {
    pub ticket_ref: Digest,
    pub payer: String,
    pub amount: i64,
    pub mode: ChargeMode,
    pub postings: Vec<Posting>,
}

#[derive(Debug)]
pub struct ChargingProvider {
    /// Account that absorbs split remainders and pays incentives.
    self_account: String,
    accounts: BTreeMap<String, i64>,
    charges: BTreeMap<Digest, ChargeRecord>,
    journal: Vec<Posting>,
}

impl ChargingProvider {
    pub fn new(self_account: &str) -> Self {
        let mut accounts = BTreeMap::new();
        accounts.insert(self_account.to_string(), 0);
        ChargingProvider {
            self_account: self_account.to_string(),
            accounts,
            charges: BTreeMap::new(),
            journal: Vec::new(),
        }
    }

    pub fn self_account(&self) -> &str {
        &self.self_account
    }

    pub fn balance(&self, account: &str) -> i64 {
        self.accounts.get(account).copied().unwrap_or(0)
    }

    /// Sum over all balances; zero at all times under double entry.
    pub fn trial_balance(&self) -> i64 {
        self.accounts.values().sum()
    }

    pub fn charge_for(&self, ticket_ref: &Digest) -> Option<&ChargeRecord> {
        self.charges.get(ticket_ref)
    }

    pub fn charge_count(&self) -> usize {
        self.charges.len()
    }

    fn post(&mut self, account: &str, delta: i64, memo: &str) -> Posting {
        *self.accounts.entry(account.to_string()).or_insert(0) += delta;
        let posting = Posting { account: account.to_string(), delta, memo: memo.to_string() };
        self.journal.push(posting.clone());
        posting
    }

    /// Settles a ticket: debits the payer, credits each agreement party its
    /// share. Returns the record and whether this call created it; replays
    /// with an already-settled reference change no balances.
    pub fn charge(
        &mut self,
        ticket_ref: Digest,
        payer: &str,
        amount: i64,
        agreement: &Agreement,
        mode: ChargeMode,
    ) -> (ChargeRecord, bool) {
        if let Some(existing) = self.charges.get(&ticket_ref) {
            return (existing.clone(), false);
        }
        let memo = format!("ticket {} {}", ticket_ref.to_hex(), mode.as_str());
        let mut postings = Vec::new();
        postings.push(self.post(payer, -amount, &memo));
        let remainder_to = self.self_account.clone();
        for (party, share) in distribute(amount, agreement, &remainder_to) {
            postings.push(self.post(&party, share, &memo));
        }
        let record = ChargeRecord { ticket_ref, payer: payer.to_string(), amount, mode, postings };
        self.charges.insert(ticket_ref, record.clone());
        (record, true)
    }

    /// Pays `amount` from the provider's own account to `account`, used for
    /// rating incentives. The receiving balance may go positive while the
    /// provider's goes negative; the trial balance stays zero.
    pub fn pay_incentive(&mut self, account: &str, amount: i64, memo: &str) -> Vec<Posting> {
        let from = self.self_account.clone();
        vec![self.post(&from, -amount, memo), self.post(account, amount, memo)]
    }

    pub fn journal(&self) -> &[Posting] {
        &self.journal
    }

    /// Human-readable statement: balances, then the journal.
    pub fn ledger_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        for (account, balance) in &self.accounts {
            lines.push(format!("balance {account} {balance}"));
        }
        for p in &self.journal {
            lines.push(format!("posting {} {} {}", p.account, p.delta, p.memo));
        }
        lines.push(format!("trial_balance {}", self.trial_balance()));
        lines
    }
}
