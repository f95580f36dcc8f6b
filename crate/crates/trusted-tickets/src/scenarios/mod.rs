//! End-to-end scenario runners.
//!
//! Each runner wires agents, the certification authority, a receiving
//! system, and the charging provider together over a [`SimNet`], drives one
//! workload through it, and returns the transcript plus a human-readable
//! summary. Runners never bypass the network for inter-party data: if a
//! value moves between parties, it moves inside an envelope and shows up in
//! the transcript.

pub mod generic;
pub mod push;
pub mod rating;

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use num_rational::Rational64;
use serde::Deserialize;
use thiserror::Error;

use crate::agent::{Agent, AgentError, IdentityAuthority};
use crate::charging::{Agreement, ChargeMode, ChargeRecord, ChargingProvider};
use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{generate_keypair, DetRng, Digest, SCHEME_SIGN};
use crate::harness::{FaultPlan, HarnessError, Segment, SimNet, Summary, Transport};
use crate::pca::{IdentityRequest, IssueOutcome, PcaService};
use crate::receiving::{ReceivingSystem, RsPolicy};
use crate::tpm::Manufacturer;

/// Message kinds used on the wire. Scenario assertions count and scan by
/// these names, so they are fixed strings rather than an enum.
pub mod kind {
    pub const REGISTER: &str = "REGISTER";
    pub const POLICY_UPDATE: &str = "POLICY_UPDATE";
    pub const IDENTITY_REQUEST: &str = "IDENTITY_REQUEST";
    pub const IDENTITY_RESPONSE: &str = "IDENTITY_RESPONSE";
    pub const IDENTITY_REFUSAL: &str = "IDENTITY_REFUSAL";
    pub const TICKET_SUBMIT: &str = "TICKET_SUBMIT";
    pub const TICKET_ACK: &str = "TICKET_ACK";
    pub const TICKET_REJECT: &str = "TICKET_REJECT";
    pub const CHARGE_REQUEST: &str = "CHARGE_REQUEST";
    pub const CHARGE_RESULT: &str = "CHARGE_RESULT";
    pub const RESOLVE_REQUEST: &str = "RESOLVE_REQUEST";
    pub const RESOLVE_RESULT: &str = "RESOLVE_RESULT";
    pub const ATTEST_CHALLENGE: &str = "ATTEST_CHALLENGE";
    pub const QUOTE: &str = "QUOTE";
    pub const CERTIFY_RESPONSE: &str = "CERTIFY_RESPONSE";
    pub const BINDKEY_PRESENT: &str = "BINDKEY_PRESENT";
    pub const CONTENT: &str = "CONTENT";
    pub const SEAL_STORE: &str = "SEAL_STORE";
    pub const READ_PLAINTEXT: &str = "READ_PLAINTEXT";
}

pub const PCA_PARTY: &str = "pca";
pub const RS_PARTY: &str = "rs";
pub const CP_PARTY: &str = "cp";
pub const SYNC_PARTY: &str = "syncs";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("scenario step failed: {0}")]
    Step(String),
}

pub(crate) fn step(err: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Step(err.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    Generic,
    Rating,
    PushSeal,
    PushBind,
    PushTicketed,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::Generic,
        ScenarioName::Rating,
        ScenarioName::PushSeal,
        ScenarioName::PushBind,
        ScenarioName::PushTicketed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Generic => "generic",
            ScenarioName::Rating => "rating",
            ScenarioName::PushSeal => "push_seal",
            ScenarioName::PushBind => "push_bind",
            ScenarioName::PushTicketed => "push_ticketed",
        }
    }

    pub fn parse(s: &str) -> Option<ScenarioName> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

/// One group to set up before the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub name: String,
    pub price: i64,
    pub charge_mode: ChargeMode,
    pub attributes: BTreeMap<String, String>,
}

/// Parses a group list: either a plain count (`3`) for generated defaults,
/// or comma-separated `name:price[:key=value[;key=value]*]` entries. The
/// reserved attribute `mode=PRE|POST` selects the charge mode.
pub fn parse_groups(spec: &str) -> Result<Vec<GroupSpec>, ScenarioError> {
    if let Ok(count) = spec.trim().parse::<u32>() {
        if count == 0 {
            return Err(ScenarioError::Config("need at least one group".into()));
        }
        return Ok((1..=count)
            .map(|i| GroupSpec {
                name: format!("group-{i}"),
                price: 10 * i as i64,
                charge_mode: ChargeMode::Pre,
                attributes: BTreeMap::from([
                    ("service".to_string(), "general".to_string()),
                    ("impact_factor".to_string(), i.to_string()),
                    ("priority".to_string(), i.to_string()),
                ]),
            })
            .collect());
    }

    let mut groups = Vec::new();
    for entry in spec.split(',') {
        let mut parts = entry.splitn(3, ':');
        let name = parts.next().unwrap_or_default().trim();
        if name.is_empty() {
            return Err(ScenarioError::Config(format!("empty group name in {entry:?}")));
        }
        let price: i64 = parts
            .next()
            .ok_or_else(|| ScenarioError::Config(format!("group {name:?} needs a price")))?
            .trim()
            .parse()
            .map_err(|_| ScenarioError::Config(format!("bad price for group {name:?}")))?;
        let mut charge_mode = ChargeMode::Pre;
        let mut attributes = BTreeMap::new();
        if let Some(attr_part) = parts.next() {
            for pair in attr_part.split(';').filter(|p| !p.is_empty()) {
                let (key, value) = pair.split_once('=').ok_or_else(|| {
                    ScenarioError::Config(format!("attribute {pair:?} is not key=value"))
                })?;
                if key == "mode" {
                    charge_mode = match value {
                        "PRE" => ChargeMode::Pre,
                        "POST" => ChargeMode::Post,
                        other => {
                            return Err(ScenarioError::Config(format!(
                                "unknown charge mode {other:?}"
                            )))
                        }
                    };
                } else {
                    attributes.insert(key.to_string(), value.to_string());
                }
            }
        }
        groups.push(GroupSpec { name: name.to_string(), price, charge_mode, attributes });
    }
    Ok(groups)
}

/// Everything a runner needs, resolved from defaults, config file, and
/// command line in that order.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub seed: u64,
    pub agents: usize,
    pub groups: Vec<GroupSpec>,
    pub faults: Vec<String>,
    pub transport: Transport,
    /// Push scenarios: number of content messages.
    pub messages: usize,
    /// Rating scenario: ratings submitted per agent.
    pub ratings: usize,
    /// Rating scenario: pricing schedule, see
    /// [`rating::parse_schedule`].
    pub schedule: String,
}

impl ScenarioConfig {
    pub fn new(name: ScenarioName) -> Self {
        ScenarioConfig {
            name,
            seed: 7,
            agents: 5,
            groups: parse_groups("3").expect("default groups"),
            faults: Vec::new(),
            transport: Transport::Inproc,
            messages: 4,
            ratings: 2,
            schedule: "linear:1".to_string(),
        }
    }
}

/// Shape of the optional TOML configuration file. Every field maps to a
/// command-line flag; flags given explicitly win over the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub agents: Option<usize>,
    pub groups: Option<String>,
    pub fault: Option<Vec<String>>,
    pub transport: Option<String>,
    pub messages: Option<usize>,
    pub ratings: Option<usize>,
    pub schedule: Option<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Config(format!("config file: {e}")))
    }

    pub fn apply(&self, config: &mut ScenarioConfig) -> Result<(), ScenarioError> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(agents) = self.agents {
            config.agents = agents;
        }
        if let Some(groups) = &self.groups {
            config.groups = parse_groups(groups)?;
        }
        if let Some(faults) = &self.fault {
            config.faults = faults.clone();
        }
        if let Some(transport) = &self.transport {
            config.transport = Transport::parse(transport).ok_or_else(|| {
                ScenarioError::Config(format!("unknown transport {transport:?}"))
            })?;
        }
        if let Some(messages) = self.messages {
            config.messages = messages;
        }
        if let Some(ratings) = self.ratings {
            config.ratings = ratings;
        }
        if let Some(schedule) = &self.schedule {
            config.schedule = schedule.clone();
        }
        Ok(())
    }
}

/// Revenue split used by every scenario: half to the receiving system,
/// three tenths to the certification authority, the rest to the provider.
pub fn default_agreement() -> Agreement {
    Agreement::new(BTreeMap::from([
        (RS_PARTY.to_string(), Rational64::new(1, 2)),
        (PCA_PARTY.to_string(), Rational64::new(3, 10)),
        (CP_PARTY.to_string(), Rational64::new(1, 5)),
    ]))
    .expect("weights sum to one")
}

/// The assembled simulation: all parties plus the network between them.
pub struct World {
    pub net: SimNet,
    pub pca: PcaService,
    pub rs: ReceivingSystem,
    pub cp: ChargingProvider,
    pub agents: Vec<Agent>,
    pub group_ids: Vec<u32>,
    pub agreement: Agreement,
}

/// Builds the world deterministically from the seed: all randomness forks
/// off one root stream, so equal configurations give equal worlds.
pub fn build_world(config: &ScenarioConfig) -> Result<World, ScenarioError> {
    if config.agents == 0 {
        return Err(ScenarioError::Config("need at least one agent".into()));
    }
    if config.groups.is_empty() {
        return Err(ScenarioError::Config("need at least one group".into()));
    }
    let mut root = DetRng::from_seed(config.seed);

    let mut maker = Manufacturer::new(root.fork("manufacturer"));
    let mut pca = PcaService::new(root.fork("pca"));
    pca.trust_manufacturer(maker.public());
    let group_ids: Vec<u32> = config
        .groups
        .iter()
        .map(|g| pca.create_group(&g.name, g.price, g.charge_mode, g.attributes.clone()))
        .collect();

    let rs_keys = generate_keypair(&mut root.fork("rs"), SCHEME_SIGN).map_err(step)?;
    let rs = ReceivingSystem::new(
        rs_keys,
        RsPolicy { group_keys: pca.group_keys(), revoked_serials: BTreeSet::new() },
    );
    pca.register_receiver(&rs.public());

    let cp = ChargingProvider::new(CP_PARTY);

    let mut agents = Vec::with_capacity(config.agents);
    for i in 0..config.agents {
        let tpm = maker.manufacture();
        let agent = Agent::new(&format!("agent-{i}"), tpm, format!("owner-{i}").as_bytes())
            .map_err(step)?;
        agents.push(agent);
    }

    let faults = FaultPlan::parse_all(&config.faults)?;
    let net = SimNet::new(faults, root.fork("net"), config.transport)?;

    Ok(World { net, pca, rs, cp, agents, group_ids, agreement: default_agreement() })
}

/// Announces the receiving system to the authority and ships it the group
/// key directory, both over the wire.
pub fn publish_policy(world: &mut World, summary: &mut Summary) -> Result<(), ScenarioError> {
    let World { net, pca, rs, group_ids, .. } = world;
    let rs_public = rs.public();
    for d in net.send(RS_PARTY, PCA_PARTY, Segment::RsPca, kind::REGISTER, &rs_public)? {
        pca.register_receiver(&d.body);
    }
    let policy = RsPolicy { group_keys: pca.group_keys(), revoked_serials: BTreeSet::new() };
    let deliveries =
        net.send(PCA_PARTY, RS_PARTY, Segment::RsPca, kind::POLICY_UPDATE, &policy.encode())?;
    for d in deliveries {
        if let Ok(policy) = RsPolicy::decode(&d.body) {
            rs.set_policy(policy);
        }
    }
    summary.event(format!(
        "policy published: {} groups, receiving system registered",
        group_ids.len()
    ));
    Ok(())
}

/// Identity authority reached through the simulated network. Requests and
/// responses are full envelopes, so faults on the TA_PCA segment hit them.
pub struct NetworkedAuthority<'a> {
    pub net: &'a mut SimNet,
    pub pca: &'a mut PcaService,
    pub agent_name: String,
    /// Successful issuances observed, for the caller to settle charges.
    pub issued: Vec<IssueOutcome>,
}

impl<'a> NetworkedAuthority<'a> {
    pub fn new(net: &'a mut SimNet, pca: &'a mut PcaService, agent_name: &str) -> Self {
        NetworkedAuthority { net, pca, agent_name: agent_name.to_string(), issued: Vec::new() }
    }
}

impl IdentityAuthority for NetworkedAuthority<'_> {
    fn request_identity(&mut self, request: &IdentityRequest) -> Result<Vec<u8>, AgentError> {
        let transport = |e: HarnessError| AgentError::Transport(e.to_string());
        let deliveries = self
            .net
            .send(
                &self.agent_name,
                PCA_PARTY,
                Segment::TaPca,
                kind::IDENTITY_REQUEST,
                &request.encode(),
            )
            .map_err(transport)?;

        // Process every delivered copy like the authority would; replays
        // surface as duplicate-platform refusals on the second pass.
        let mut last: Option<Result<IssueOutcome, String>> = None;
        for d in deliveries.iter().filter(|d| d.kind == kind::IDENTITY_REQUEST) {
            let result = match IdentityRequest::decode(&d.body) {
                Ok(decoded) => self.pca.issue(&decoded).map_err(|e| e.to_string()),
                Err(e) => Err(format!("malformed request: {e}")),
            };
            last = Some(result);
        }

        match last {
            None => Err(AgentError::Transport("request lost in transit".into())),
            Some(Ok(outcome)) => {
                let responses = self
                    .net
                    .send(
                        PCA_PARTY,
                        &self.agent_name,
                        Segment::TaPca,
                        kind::IDENTITY_RESPONSE,
                        &outcome.activation_blob,
                    )
                    .map_err(transport)?;
                self.issued.push(outcome);
                let blob = responses
                    .into_iter()
                    .filter(|d| d.kind == kind::IDENTITY_RESPONSE)
                    .map(|d| d.body)
                    .next_back();
                blob.ok_or_else(|| AgentError::Transport("response lost in transit".into()))
            }
            Some(Err(text)) => {
                self.net
                    .send(
                        PCA_PARTY,
                        &self.agent_name,
                        Segment::TaPca,
                        kind::IDENTITY_REFUSAL,
                        text.as_bytes(),
                    )
                    .map_err(transport)?;
                Err(AgentError::Authority(text))
            }
        }
    }
}

/// Settlement request the authority sends to the charging provider.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChargeRequest {
    pub ticket_ref: Digest,
    pub payer: String,
    pub amount: i64,
    pub mode: ChargeMode,
}

impl ChargeRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(crate::codec::WIRE_VERSION);
        self.ticket_ref.encode_into(&mut w);
        w.string(&self.payer);
        w.i64(self.amount);
        w.u8(self.mode.to_u8());
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let ticket_ref = Digest::decode_from(&mut r)?;
        let payer = r.string()?;
        let amount = r.i64()?;
        let tag = r.u8()?;
        let mode = ChargeMode::from_u8(tag).ok_or(CodecError::BadTag(tag))?;
        r.finish()?;
        Ok(ChargeRequest { ticket_ref, payer, amount, mode })
    }
}

/// Provider's answer: whether this reference created a new settlement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChargeResult {
    pub ticket_ref: Digest,
    pub fresh: bool,
}

impl ChargeResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(crate::codec::WIRE_VERSION);
        self.ticket_ref.encode_into(&mut w);
        w.u8(self.fresh as u8);
        w.into_vec()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        r.version()?;
        let ticket_ref = Digest::decode_from(&mut r)?;
        let fresh = match r.u8()? {
            0 => false,
            1 => true,
            tag => return Err(CodecError::BadTag(tag)),
        };
        r.finish()?;
        Ok(ChargeResult { ticket_ref, fresh })
    }
}

/// Runs one settlement across the authority-provider link. Returns what
/// the provider recorded, or `None` when the request never arrived.
pub fn charge_over_net(
    net: &mut SimNet,
    cp: &mut ChargingProvider,
    agreement: &Agreement,
    request: &ChargeRequest,
) -> Result<Option<(ChargeRecord, bool)>, ScenarioError> {
    let deliveries = net.send(
        PCA_PARTY,
        CP_PARTY,
        Segment::PcaCp,
        kind::CHARGE_REQUEST,
        &request.encode(),
    )?;
    let mut last = None;
    for d in deliveries.iter().filter(|d| d.kind == kind::CHARGE_REQUEST) {
        if let Ok(decoded) = ChargeRequest::decode(&d.body) {
            last = Some(cp.charge(
                decoded.ticket_ref,
                &decoded.payer,
                decoded.amount,
                agreement,
                decoded.mode,
            ));
        }
    }
    if let Some((record, fresh)) = &last {
        let result = ChargeResult { ticket_ref: record.ticket_ref, fresh: *fresh };
        net.send(CP_PARTY, PCA_PARTY, Segment::PcaCp, kind::CHARGE_RESULT, &result.encode())?;
    }
    Ok(last)
}

/// What a finished run hands to the command line and to tests.
pub struct ScenarioOutcome {
    pub summary: Summary,
    pub transcript: String,
    /// Ledger statements keyed by party name (`pca`, `rs`, `cp`).
    pub ledgers: BTreeMap<String, Vec<String>>,
}

pub(crate) fn outcome_from(world: &World, summary: Summary) -> ScenarioOutcome {
    let mut ledgers = BTreeMap::new();
    ledgers.insert(PCA_PARTY.to_string(), world.pca.ledger_lines());
    ledgers.insert(RS_PARTY.to_string(), world.rs.ledger_lines());
    ledgers.insert(CP_PARTY.to_string(), world.cp.ledger_lines());
    ScenarioOutcome { summary, transcript: world.net.transcript_text(), ledgers }
}

/// Runs the named scenario to completion.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioOutcome, ScenarioError> {
    match config.name {
        ScenarioName::Generic => {
            generic::run(config).map(|(world, summary)| outcome_from(&world, summary))
        }
        ScenarioName::Rating => rating::run(config).map(|r| r.outcome),
        ScenarioName::PushSeal => push::run_seal(config),
        ScenarioName::PushBind => push::run_bind(config),
        ScenarioName::PushTicketed => push::run_ticketed(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_count_expands_to_defaults() {
        let groups = parse_groups("3").unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[0].name, "group-1");
        assert_eq!(groups[2].price, 30);
        assert_eq!(groups[1].attributes.get("impact_factor").unwrap(), "2");
    }

    #[test]
    fn group_specs_parse_fields() {
        let groups = parse_groups("cinema:25:mode=POST;impact_factor=4,bus:3").unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].name, "cinema");
        assert_eq!(groups[0].price, 25);
        assert_eq!(groups[0].charge_mode, ChargeMode::Post);
        assert_eq!(groups[0].attributes.get("impact_factor").unwrap(), "4");
        assert!(!groups[0].attributes.contains_key("mode"));
        assert_eq!(groups[1].charge_mode, ChargeMode::Pre);

        assert!(parse_groups("0").is_err());
        assert!(parse_groups("cinema").is_err());
        assert!(parse_groups("cinema:x").is_err());
        assert!(parse_groups("cinema:5:oops").is_err());
        assert!(parse_groups("cinema:5:mode=MAYBE").is_err());
    }

    #[test]
    fn config_file_overrides_defaults() {
        let file = ConfigFile::parse(
            "seed = 42\nagents = 9\ngroups = \"2\"\nfault = [\"DROP:TA_RS\"]\ntransport = \"inproc\"\n",
        )
        .unwrap();
        let mut config = ScenarioConfig::new(ScenarioName::Generic);
        file.apply(&mut config).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.agents, 9);
        assert_eq!(config.groups.len(), 2);
        assert_eq!(config.faults, vec!["DROP:TA_RS".to_string()]);

        assert!(ConfigFile::parse("nonsense = true").is_err());
        let bad = ConfigFile::parse("transport = \"pigeon\"").unwrap();
        assert!(bad.apply(&mut config).is_err());
    }

    #[test]
    fn charge_messages_round_trip() {
        let request = ChargeRequest {
            ticket_ref: crate::crypto::hash(b"t"),
            payer: "agent-3".into(),
            amount: 125,
            mode: ChargeMode::Post,
        };
        assert_eq!(ChargeRequest::decode(&request.encode()).unwrap(), request);

        let result = ChargeResult { ticket_ref: crate::crypto::hash(b"t"), fresh: true };
        assert_eq!(ChargeResult::decode(&result.encode()).unwrap(), result);
    }

    #[test]
    fn worlds_are_deterministic_in_the_seed() {
        let config = ScenarioConfig::new(ScenarioName::Generic);
        let a = build_world(&config).unwrap();
        let b = build_world(&config).unwrap();
        assert_eq!(a.pca.root_public(), b.pca.root_public());
        assert_eq!(a.rs.public(), b.rs.public());
        assert_eq!(a.agents[0].tpm().ek_public(), b.agents[0].tpm().ek_public());

        let mut other = config.clone();
        other.seed = 8;
        let c = build_world(&other).unwrap();
        assert_ne!(a.pca.root_public(), c.pca.root_public());
    }

    #[test]
    fn charge_over_net_records_and_answers() {
        let config = ScenarioConfig::new(ScenarioName::Generic);
        let mut world = build_world(&config).unwrap();
        let request = ChargeRequest {
            ticket_ref: crate::crypto::hash(b"ref"),
            payer: "agent-0".into(),
            amount: 100,
            mode: ChargeMode::Pre,
        };
        let (record, fresh) = charge_over_net(
            &mut world.net,
            &mut world.cp,
            &world.agreement.clone(),
            &request,
        )
        .unwrap()
        .unwrap();
        assert!(fresh);
        assert_eq!(record.amount, 100);
        assert_eq!(world.cp.balance("agent-0"), -100);
        assert_eq!(world.cp.balance(RS_PARTY), 50);
        assert_eq!(world.cp.trial_balance(), 0);
        let kinds: Vec<&str> =
            world.net.envelopes().iter().map(|e| e.kind.as_str()).collect();
        assert_eq!(kinds, vec![kind::CHARGE_REQUEST, kind::CHARGE_RESULT]);
    }
}
