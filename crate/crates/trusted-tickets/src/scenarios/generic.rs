//! Baseline access workload: every agent obtains one group credential,
//! gets charged for it, and redeems it once at the receiving system. With
//! faults configured the same flow shows rejects, kept tickets, and the
//! double-spender resolution path.

use std::collections::{BTreeMap, VecDeque};

use crate::agent::{Agent, PreparedRedemption};
use crate::credential::Credential;
use crate::crypto::Digest;
use crate::harness::{Delivery, Segment, SimNet, Summary};
use crate::pca::ResolveRequest;
use crate::receiving::ReceivingSystem;
use crate::scenarios::{
    charge_over_net, kind, publish_policy, ChargeRequest, NetworkedAuthority, ScenarioConfig,
    ScenarioError, World, CP_PARTY, PCA_PARTY, RS_PARTY,
};

/// In-flight submissions keyed by agent name, waiting for a response.
type Pending = BTreeMap<String, (usize, PreparedRedemption)>;

/// Processes a batch of deliveries: the receiving system answers every
/// submitted ticket, and each response finishes the matching agent's
/// redemption. Responses generated along the way join the queue, so
/// replayed and delayed traffic is handled in arrival order.
#[allow(clippy::too_many_arguments)]
fn pump_deliveries(
    deliveries: Vec<Delivery>,
    net: &mut SimNet,
    rs: &ReceivingSystem,
    agents: &mut [Agent],
    rs_public: &[u8],
    pending: &mut Pending,
    summary: &mut Summary,
    acks: &mut usize,
) -> Result<(), ScenarioError> {
    let mut queue: VecDeque<Delivery> = deliveries.into();
    while let Some(d) = queue.pop_front() {
        if d.kind == kind::TICKET_SUBMIT && d.to == RS_PARTY {
            let (response_kind, body) = match rs.redeem(&d.body) {
                Ok(ack) => (kind::TICKET_ACK, ack.encode()),
                Err(e) => (kind::TICKET_REJECT, e.to_string().into_bytes()),
            };
            queue.extend(net.send(RS_PARTY, &d.from, Segment::TaRs, response_kind, &body)?);
        } else if d.kind == kind::TICKET_ACK || d.kind == kind::TICKET_REJECT {
            let Some((idx, prepared)) = pending.remove(&d.to) else {
                continue;
            };
            let response = if d.kind == kind::TICKET_ACK {
                Credential::decode(&d.body)
                    .map_err(|_| "unreadable acknowledgement".to_string())
            } else {
                Err(String::from_utf8_lossy(&d.body).into_owned())
            };
            match agents[idx].complete_redemption(prepared, rs_public, response) {
                Ok(_) => {
                    *acks += 1;
                    summary.event(format!("{} redeemed: acknowledgement verified", d.to));
                }
                Err(e) => summary.event(format!("{} redemption failed: {e}", d.to)),
            }
        }
    }
    Ok(())
}

pub fn run(config: &ScenarioConfig) -> Result<(World, Summary), ScenarioError> {
    let mut world = super::build_world(config)?;
    let mut summary = Summary::default();
    publish_policy(&mut world, &mut summary)?;

    // Acquisition and settlement. The authority charges on issue, keyed by
    // the pseudonymous identity so a re-request cannot double-bill.
    let mut held: Vec<(usize, Digest)> = Vec::new();
    {
        let World { net, pca, cp, agents, group_ids, agreement, .. } = &mut world;
        for (i, agent) in agents.iter_mut().enumerate() {
            let name = format!("agent-{i}");
            let group_id = group_ids[i % group_ids.len()];
            let mut authority = NetworkedAuthority::new(net, pca, &name);
            match agent.acquire_ticket(&mut authority, group_id, "access") {
                Ok(aik_digest) => {
                    let issued =
                        authority.issued.iter().find(|o| o.aik_digest == aik_digest).cloned();
                    summary.event(format!("{name} holds group {group_id} credential"));
                    held.push((i, aik_digest));
                    let Some(outcome) = issued else { continue };
                    let request = ChargeRequest {
                        ticket_ref: outcome.aik_digest,
                        payer: name.clone(),
                        amount: outcome.price,
                        mode: outcome.charge_mode,
                    };
                    match charge_over_net(net, cp, agreement, &request)? {
                        Some((record, true)) => {
                            summary.event(format!("{name} charged {}", record.amount))
                        }
                        Some((_, false)) => {
                            summary.event(format!("{name} charge was already settled"))
                        }
                        None => summary.event(format!("{name} charge lost in transit")),
                    }
                }
                Err(e) => summary.event(format!("{name} acquisition failed: {e}")),
            }
        }
    }

    // Redemption. Tickets stay redeemable until a verified acknowledgement
    // arrives, so lost or mangled responses leave them intact.
    let mut acks = 0usize;
    {
        let World { net, rs, agents, .. } = &mut world;
        let rs_public = rs.public();
        let mut pending: Pending = BTreeMap::new();
        for (idx, aik_digest) in &held {
            let name = format!("agent-{idx}");
            let payload = format!("admit {name}").into_bytes();
            let prepared = match agents[*idx].prepare_redemption(aik_digest, &payload) {
                Ok(p) => p,
                Err(e) => {
                    summary.event(format!("{name} could not prepare submission: {e}"));
                    continue;
                }
            };
            let ticket_bytes = prepared.ticket_bytes.clone();
            pending.insert(name.clone(), (*idx, prepared));
            let deliveries =
                net.send(&name, RS_PARTY, Segment::TaRs, kind::TICKET_SUBMIT, &ticket_bytes)?;
            pump_deliveries(
                deliveries, net, rs, agents, &rs_public, &mut pending, &mut summary, &mut acks,
            )?;
        }
        let flushed = net.flush()?;
        pump_deliveries(
            flushed, net, rs, agents, &rs_public, &mut pending, &mut summary, &mut acks,
        )?;
        for (name, (idx, prepared)) in std::mem::take(&mut pending) {
            let _ = agents[idx].complete_redemption(prepared, &rs_public, Err("no response".into()));
            summary.event(format!("{name} got no response; ticket kept"));
        }
    }

    // Accountability: a duplicate submission in the journal is cause to
    // de-pseudonymise, and only then.
    {
        let World { net, pca, rs, .. } = &mut world;
        let cheat = rs
            .journal()
            .into_iter()
            .find(|e| e.outcome == "rejected: already spent")
            .and_then(|e| e.aik_digest);
        if let Some(aik_digest) = cheat {
            match rs.report_misbehaviour(aik_digest, "duplicate submission") {
                Ok(request) => {
                    let deliveries = net.send(
                        RS_PARTY,
                        PCA_PARTY,
                        Segment::RsPca,
                        kind::RESOLVE_REQUEST,
                        &request.encode(),
                    )?;
                    let mut resolved = None;
                    for d in deliveries.iter().filter(|d| d.kind == kind::RESOLVE_REQUEST) {
                        if let Ok(decoded) = ResolveRequest::decode(&d.body) {
                            resolved = Some(pca.resolve_identity(&decoded));
                        }
                    }
                    match resolved {
                        Some(Ok(disclosure)) => {
                            net.send(
                                PCA_PARTY,
                                RS_PARTY,
                                Segment::RsPca,
                                kind::RESOLVE_RESULT,
                                &disclosure.encode(),
                            )?;
                            summary.event(format!(
                                "double spender resolved to platform {}",
                                disclosure.platform_id.to_hex()
                            ));
                        }
                        Some(Err(e)) => summary.event(format!("resolution refused: {e}")),
                        None => summary.event("resolution request lost in transit".to_string()),
                    }
                }
                Err(e) => summary.event(format!("misbehaviour report failed: {e}")),
            }
        }
    }

    summary.event(format!("acknowledgements verified: {acks}"));
    summary.event(format!("identities escrowed: {}", world.pca.escrow_count()));
    summary.event(format!("tickets spent at receiving system: {}", world.rs.spent_count()));
    summary.event(format!("settlements recorded: {}", world.cp.charge_count()));
    let trial = world.cp.trial_balance();
    if trial != 0 {
        summary.violation(format!("charging ledger out of balance: {trial}"));
    }
    let provider = world.cp.balance(CP_PARTY);
    if provider < 0 {
        summary.event(format!("provider account negative: {provider}"));
    }
    Ok((world, summary))
}
