//! Pseudonymous rating workload.
//!
//! Raters buy a fresh single-use identity for every rating they submit, so
//! the receiving system cannot link two ratings to the same person. The
//! authority, which sees the platform behind each identity in escrow, uses
//! that history for pricing: repeat raters can be charged more (or paid an
//! incentive) without anyone downstream learning who they are.

use std::collections::BTreeMap;

use num_rational::Rational64;

use crate::codec::{CodecError, Reader, Writer};
use crate::credential::{verify_ticket_chain, Ticket, VerifiedTicket};
use crate::crypto::{hash, Digest};
use crate::harness::{Segment, Summary};
use crate::scenarios::{
    charge_over_net, kind, outcome_from, publish_policy, ChargeRequest, ChargeResult,
    NetworkedAuthority, ScenarioConfig, ScenarioError, ScenarioOutcome, World, CP_PARTY,
    PCA_PARTY, RS_PARTY,
};

/// How the authority prices a rating ticket from the platform's history.
/// `base` is the group's configured price; `past` are the ticks at which
/// this platform previously bought rating tickets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PriceSchedule {
    /// The group price, always.
    Flat,
    /// Group price plus `slope` per previous rating, ever.
    LinearCount { slope: i64 },
    /// Group price plus `slope` per previous rating in the last `window`
    /// ticks; spreading ratings out keeps them cheap.
    Frequency { slope: i64, window: u64 },
    /// The rater is paid `amount` instead of paying.
    Incentive { amount: i64 },
}

impl PriceSchedule {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |msg: &str| Err(ScenarioError::Config(msg.to_string()));
        match *self {
            PriceSchedule::Flat => Ok(()),
            PriceSchedule::LinearCount { slope } if slope < 0 => bad("slope must be >= 0"),
            PriceSchedule::LinearCount { .. } => Ok(()),
            PriceSchedule::Frequency { slope, .. } if slope < 0 => bad("slope must be >= 0"),
            PriceSchedule::Frequency { window: 0, .. } => {
                bad("window must be positive")
            }
            PriceSchedule::Frequency { .. } => Ok(()),
            PriceSchedule::Incentive { amount } if amount < 0 => bad("amount must be >= 0"),
            PriceSchedule::Incentive { .. } => Ok(()),
        }
    }

    /// Price of the next ticket; negative means money flows to the rater.
    pub fn price_for(&self, base: i64, past: &[u64], now: u64) -> i64 {
        match *self {
            PriceSchedule::Flat => base,
            PriceSchedule::LinearCount { slope } => base + slope * past.len() as i64,
            PriceSchedule::Frequency { slope, window } => {
                let recent = past.iter().filter(|t| now.saturating_sub(**t) < window).count();
                base + slope * recent as i64
            }
            PriceSchedule::Incentive { amount } => -amount,
        }
    }
}

/// Parses `flat`, `linear[:slope]`, `frequency[:slope[:window]]`, or
/// `incentive[:amount]`.
pub fn parse_schedule(spec: &str) -> Result<PriceSchedule, ScenarioError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let arg = |i: usize, default: i64| -> Result<i64, ScenarioError> {
        match parts.get(i) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| ScenarioError::Config(format!("bad schedule number {raw:?}"))),
        }
    };
    let schedule = match parts[0] {
        "flat" => PriceSchedule::Flat,
        "linear" => PriceSchedule::LinearCount { slope: arg(1, 1)? },
        "frequency" => {
            PriceSchedule::Frequency { slope: arg(1, 1)?, window: arg(2, 4)? as u64 }
        }
        "incentive" => PriceSchedule::Incentive { amount: arg(1, 5)? },
        other => return Err(ScenarioError::Config(format!("unknown schedule {other:?}"))),
    };
    schedule.validate()?;
    Ok(schedule)
}

/// A rating as it travels inside the ticket payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rating {
    pub subject_ref: Digest,
    /// 1 (worst) through 5 (best).
    pub score: u8,
}

impl Rating {
    pub fn new(subject_ref: Digest, score: u8) -> Option<Rating> {
        (1..=5).contains(&score).then_some(Rating { subject_ref, score })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(crate::codec::WIRE_VERSION);
        self.subject_ref.encode_into(&mut w);
        w.u8(self.score);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Rating, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let subject_ref = Digest::decode_from(&mut r)?;
        let score = r.u8()?;
        r.finish()?;
        Rating::new(subject_ref, score).ok_or(CodecError::BadTag(score))
    }
}

/// One accepted rating with everything that weights it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedRating {
    pub subject_ref: Digest,
    pub score: u8,
    pub weight: i64,
    pub group_id: u32,
    pub aik_digest: Digest,
}

/// Accepted ratings and their weighted aggregation. The weight comes from
/// the `impact_factor` attribute of the rater's group credential, so the
/// rated party can tell a reviewer class apart without identifying anyone.
#[derive(Debug, Clone, Default)]
pub struct RatingStore {
    entries: Vec<RecordedRating>,
}

impl RatingStore {
    pub fn record(&mut self, verified: &VerifiedTicket, rating: Rating) {
        let weight = verified
            .attributes
            .get("impact_factor")
            .and_then(|v| v.parse().ok())
            .unwrap_or(1)
            .max(1);
        self.entries.push(RecordedRating {
            subject_ref: rating.subject_ref,
            score: rating.score,
            weight,
            group_id: verified.group_id,
            aik_digest: verified.aik_digest,
        });
    }

    pub fn entries(&self) -> &[RecordedRating] {
        &self.entries
    }

    /// Weighted mean of all scores for `subject`, exact.
    pub fn aggregate(&self, subject: &Digest) -> Option<Rational64> {
        let mut weighted = 0i64;
        let mut total = 0i64;
        for e in self.entries.iter().filter(|e| e.subject_ref == *subject) {
            weighted += e.weight * e.score as i64;
            total += e.weight;
        }
        (total > 0).then(|| Rational64::new(weighted, total))
    }

    pub fn aggregates(&self) -> BTreeMap<Digest, Rational64> {
        let subjects: std::collections::BTreeSet<Digest> =
            self.entries.iter().map(|e| e.subject_ref).collect();
        subjects.into_iter().filter_map(|s| self.aggregate(&s).map(|a| (s, a))).collect()
    }
}

pub struct RatingRun {
    pub outcome: ScenarioOutcome,
    pub store: RatingStore,
    pub aggregates: BTreeMap<Digest, Rational64>,
    /// Sequence of prices the schedule produced, in charge order.
    pub prices: Vec<i64>,
    pub world: World,
}

/// Settles one rating ticket. Non-negative prices are ordinary charges;
/// negative ones are incentives paid out by the provider.
fn settle(
    world: &mut World,
    ticket_ref: Digest,
    payer: &str,
    amount: i64,
) -> Result<(), ScenarioError> {
    let World { net, cp, agreement, .. } = world;
    if amount >= 0 {
        let request = ChargeRequest {
            ticket_ref,
            payer: payer.to_string(),
            amount,
            mode: crate::charging::ChargeMode::Pre,
        };
        charge_over_net(net, cp, agreement, &request)?;
        return Ok(());
    }
    let request = ChargeRequest {
        ticket_ref,
        payer: payer.to_string(),
        amount,
        mode: crate::charging::ChargeMode::Post,
    };
    let deliveries =
        net.send(PCA_PARTY, CP_PARTY, Segment::PcaCp, kind::CHARGE_REQUEST, &request.encode())?;
    let mut paid = false;
    for d in deliveries.iter().filter(|d| d.kind == kind::CHARGE_REQUEST) {
        if let Ok(decoded) = ChargeRequest::decode(&d.body) {
            let memo = format!("rating incentive {}", decoded.ticket_ref.to_hex());
            cp.pay_incentive(&decoded.payer, -decoded.amount, &memo);
            paid = true;
        }
    }
    if paid {
        let result = ChargeResult { ticket_ref, fresh: true };
        net.send(CP_PARTY, PCA_PARTY, Segment::PcaCp, kind::CHARGE_RESULT, &result.encode())?;
    }
    Ok(())
}

pub fn run(config: &ScenarioConfig) -> Result<RatingRun, ScenarioError> {
    let schedule = parse_schedule(&config.schedule)?;
    let mut world = super::build_world(config)?;
    let mut summary = Summary::default();
    publish_policy(&mut world, &mut summary)?;

    let subjects: Vec<Digest> =
        (1..=3).map(|k| hash(format!("venue-{k}").as_bytes())).collect();
    let base_prices: BTreeMap<u32, i64> = world
        .group_ids
        .iter()
        .map(|id| (*id, world.pca.group(*id).map(|g| g.price).unwrap_or(0)))
        .collect();

    let mut history: BTreeMap<Digest, Vec<u64>> = BTreeMap::new();
    let mut store = RatingStore::default();
    let mut prices = Vec::new();
    let mut tick = 0u64;

    for round in 0..config.ratings {
        for i in 0..world.agents.len() {
            tick += 1;
            let name = format!("agent-{i}");
            let group_id = world.group_ids[i % world.group_ids.len()];

            // A fresh pseudonym per rating; linkage exists only in escrow.
            let aik_digest = {
                let World { net, pca, agents, .. } = &mut world;
                let mut authority = NetworkedAuthority::new(net, pca, &name);
                match agents[i].acquire_ticket(&mut authority, group_id, "rating") {
                    Ok(d) => d,
                    Err(e) => {
                        summary.event(format!("{name} could not get a rating ticket: {e}"));
                        continue;
                    }
                }
            };

            // Price from the platform's history as the authority sees it.
            let platform_id = world
                .pca
                .escrow_record(&aik_digest)
                .map(|r| r.platform_id)
                .ok_or_else(|| ScenarioError::Step("issued identity missing escrow".into()))?;
            let past = history.get(&platform_id).cloned().unwrap_or_default();
            let amount = schedule.price_for(base_prices[&group_id], &past, tick);
            settle(&mut world, aik_digest, &name, amount)?;
            history.entry(platform_id).or_default().push(tick);
            prices.push(amount);
            summary.event(format!("{name} priced at {amount} for rating {tick}"));

            // Submit the rating as the ticket payload.
            let subject = subjects[(i + round) % subjects.len()];
            let score = ((i + 2 * round) % 5 + 1) as u8;
            let rating = Rating::new(subject, score).expect("score in range");
            let payload = rating.encode();

            let World { net, rs, agents, .. } = &mut world;
            let rs_public = rs.public();
            let prepared = match agents[i].prepare_redemption(&aik_digest, &payload) {
                Ok(p) => p,
                Err(e) => {
                    summary.event(format!("{name} could not submit rating: {e}"));
                    continue;
                }
            };
            let ticket_bytes = prepared.ticket_bytes.clone();
            let deliveries =
                net.send(&name, RS_PARTY, Segment::TaRs, kind::TICKET_SUBMIT, &ticket_bytes)?;
            let mut response = None;
            for d in deliveries.iter().filter(|d| d.kind == kind::TICKET_SUBMIT) {
                let result = rs.redeem(&d.body);
                if result.is_ok() {
                    // The rating service rides on the verified chain: decode
                    // the payload and weight it by the group attributes.
                    let policy = rs.policy();
                    if let Ok(ticket) = Ticket::decode(&d.body) {
                        if let Ok(verified) = verify_ticket_chain(&ticket, &policy.group_keys) {
                            if let Ok(decoded) = Rating::decode(&verified.payload) {
                                store.record(&verified, decoded);
                            }
                        }
                    }
                }
                let (response_kind, body) = match &result {
                    Ok(ack) => (kind::TICKET_ACK, ack.encode()),
                    Err(e) => (kind::TICKET_REJECT, e.to_string().into_bytes()),
                };
                for r in net.send(RS_PARTY, &name, Segment::TaRs, response_kind, &body)? {
                    if r.kind == kind::TICKET_ACK {
                        response = Some(
                            crate::credential::Credential::decode(&r.body)
                                .map_err(|_| "unreadable acknowledgement".to_string()),
                        );
                    } else if r.kind == kind::TICKET_REJECT {
                        response = Some(Err(String::from_utf8_lossy(&r.body).into_owned()));
                    }
                }
            }
            let response = response.unwrap_or(Err("no response".to_string()));
            match agents[i].complete_redemption(prepared, &rs_public, response) {
                Ok(_) => summary.event(format!("{name} rating {tick} accepted")),
                Err(e) => summary.event(format!("{name} rating {tick} failed: {e}")),
            }
        }
    }

    // Delayed envelopes past this point can no longer be answered.
    world.net.flush()?;

    for (subject, aggregate) in store.aggregates() {
        summary.event(format!(
            "subject {} aggregate {aggregate}",
            &subject.to_hex()[..8]
        ));
    }
    summary.event(format!("ratings recorded: {}", store.entries().len()));
    summary.event(format!("identities escrowed: {}", world.pca.escrow_count()));
    let trial = world.cp.trial_balance();
    if trial != 0 {
        summary.violation(format!("charging ledger out of balance: {trial}"));
    }
    let provider = world.cp.balance(CP_PARTY);
    if provider < 0 {
        summary.event(format!("provider account negative: {provider}"));
    }

    let aggregates = store.aggregates();
    let outcome = outcome_from(&world, summary);
    Ok(RatingRun { outcome, store, aggregates, prices, world })
}
