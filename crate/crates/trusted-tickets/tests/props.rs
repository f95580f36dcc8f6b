//! Property checks over structural invariants: encodings round-trip and
//! reject trailing bytes, transcripts survive rendering, the measurement log
//! always replays to the live composite, revenue splits conserve every unit,
//! and rating aggregates stay inside the score range.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Rational64;
use proptest::prelude::*;
use trusted_tickets::charging::{Agreement, ChargeMode, ChargingProvider};
use trusted_tickets::credential::{Credential, SubjectKind, Ticket, VerifiedTicket};
use trusted_tickets::crypto::{hash, DetRng};
use trusted_tickets::harness::{parse_transcript, render_transcript, Envelope, Segment};
use trusted_tickets::scenarios::rating::{Rating, RatingStore};
use trusted_tickets::tpm::{composite_of, replay_log, Manufacturer};

fn subject_kind() -> impl Strategy<Value = SubjectKind> {
    prop_oneof![
        Just(SubjectKind::AikGroup),
        Just(SubjectKind::Csk),
        Just(SubjectKind::Payload),
        Just(SubjectKind::Ek),
        Just(SubjectKind::BindingKey),
    ]
}

fn credential() -> impl Strategy<Value = Credential> {
    (
        subject_kind(),
        prop::collection::vec(any::<u8>(), 0..100),
        prop::collection::vec(any::<u8>(), 0..50),
        prop::collection::vec(any::<u8>(), 0..80),
    )
        .prop_map(|(subject_kind, subject_bytes, issuer_public, signature)| Credential {
            subject_kind,
            subject_bytes,
            issuer_public,
            signature,
        })
}

fn segment() -> impl Strategy<Value = Segment> {
    prop_oneof![
        Just(Segment::TaPca),
        Just(Segment::TaRs),
        Just(Segment::PcaCp),
        Just(Segment::RsPca),
        Just(Segment::Noc),
        Just(Segment::DeviceLocal),
    ]
}

proptest! {
    #[test]
    fn ticket_encoding_round_trips(
        group_id in any::<u32>(),
        payload in prop::collection::vec(any::<u8>(), 0..200),
        cert_payload in credential(),
        cert_csk in credential(),
        cert_group in credential(),
    ) {
        let ticket = Ticket { payload, cert_payload, cert_csk, cert_group, group_id };
        let bytes = ticket.encode();
        prop_assert_eq!(Ticket::decode(&bytes).unwrap(), ticket.clone());

        let mut trailing = bytes.clone();
        trailing.push(0);
        prop_assert!(Ticket::decode(&trailing).is_err());

        let cred_bytes = ticket.cert_group.encode();
        prop_assert_eq!(Credential::decode(&cred_bytes).unwrap(), ticket.cert_group);
    }

    #[test]
    fn transcript_rendering_round_trips(
        entries in prop::collection::vec(
            (
                "[a-z][a-z0-9-]{0,11}",
                "[a-z][a-z0-9-]{0,11}",
                segment(),
                "[A-Z][A-Z_]{0,14}",
                prop::collection::vec(any::<u8>(), 0..64),
            ),
            0..12,
        ),
    ) {
        let envelopes: Vec<Envelope> = entries
            .into_iter()
            .enumerate()
            .map(|(i, (from, to, segment, kind, body))| Envelope {
                seq: i as u64 + 1,
                from,
                to,
                segment,
                kind,
                body,
            })
            .collect();
        let text = render_transcript(&envelopes);
        prop_assert_eq!(parse_transcript(&text).unwrap(), envelopes);
    }

    #[test]
    fn revenue_split_conserves_every_unit(
        raw in prop::collection::vec(0..20i64, 1..6),
        amount in -1000..1_000_000i64,
        post in any::<bool>(),
        case in any::<u64>(),
    ) {
        let total: i64 = raw.iter().sum();
        prop_assume!(total > 0);
        let mut weights = BTreeMap::new();
        for (i, r) in raw.iter().enumerate() {
            let name = if i == 0 { "cp".to_string() } else { format!("party-{i}") };
            weights.insert(name, Rational64::new(*r, total));
        }
        let agreement = Agreement::new(weights).unwrap();
        let mode = if post { ChargeMode::Post } else { ChargeMode::Pre };

        let mut cp = ChargingProvider::new("cp");
        let (record, fresh) = cp.charge(hash(&case.to_be_bytes()), "payer", amount, &agreement, mode);
        prop_assert!(fresh);
        prop_assert_eq!(record.postings.iter().map(|p| p.delta).sum::<i64>(), 0);

        // Each named share is within one unit below its exact entitlement.
        for posting in &record.postings[1..] {
            if posting.account == "cp" {
                continue;
            }
            let weight = agreement.weights()[&posting.account];
            let exact = Rational64::from_integer(amount) * weight;
            prop_assert!(Rational64::from_integer(posting.delta) <= exact);
            prop_assert!(exact < Rational64::from_integer(posting.delta + 1));
        }

        // Same reference again: no new postings, balances unchanged.
        let journal_len = cp.journal().len();
        let (_, fresh) = cp.charge(hash(&case.to_be_bytes()), "payer", amount, &agreement, mode);
        prop_assert!(!fresh);
        prop_assert_eq!(cp.journal().len(), journal_len);
        prop_assert_eq!(cp.trial_balance(), 0);
    }

    #[test]
    fn rating_aggregate_stays_inside_score_range(
        samples in prop::collection::vec((1..=5u8, 1..=9i64), 1..20),
    ) {
        let subject = hash(b"prop subject");
        let mut store = RatingStore::default();
        for (i, (score, weight)) in samples.iter().enumerate() {
            let verified = VerifiedTicket {
                group_id: 1,
                payload: Vec::new(),
                aik_digest: hash(&(i as u64).to_be_bytes()),
                attributes: BTreeMap::from([
                    ("impact_factor".to_string(), weight.to_string()),
                ]),
                credential_serial: i as u64,
            };
            store.record(&verified, Rating::new(subject, *score).unwrap());
        }
        let aggregate = store.aggregate(&subject).unwrap();
        let min = *samples.iter().map(|(s, _)| s).min().unwrap() as i64;
        let max = *samples.iter().map(|(s, _)| s).max().unwrap() as i64;
        prop_assert!(Rational64::from_integer(min) <= aggregate);
        prop_assert!(aggregate <= Rational64::from_integer(max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn measurement_log_replays_to_live_composite(
        seed in any::<u64>(),
        steps in prop::collection::vec((0..24u32, any::<u64>()), 0..20),
        picks in prop::collection::vec(0..24u32, 1..5),
    ) {
        let mut maker = Manufacturer::new(DetRng::from_seed(seed));
        let mut tpm = maker.manufacture();
        for (index, marker) in &steps {
            tpm.pcr_extend(*index, &hash(&marker.to_be_bytes()), "step").unwrap();
        }
        let selection: BTreeSet<u32> = picks.into_iter().collect();
        let live = tpm.pcr_composite(&selection).unwrap();
        let replayed = replay_log(tpm.measurement_log()).unwrap();
        prop_assert_eq!(composite_of(&replayed, &selection).unwrap(), live);
    }
}
