// The deterministic network by itself: envelopes, the transcript format,
// fault rules matched by segment, kind, and occurrence, and the two
// carriers (in-process and a loopback socket moving real bytes).
//
// Run with: cargo run --example simulated_network

use trusted_tickets::crypto::DetRng;
use trusted_tickets::harness::{
    count_kind, FaultPlan, Segment, SimNet, Transport,
};

fn main() {
    // Rules parse from the same specs the command line accepts. This one
    // duplicates the second PING crossing the relay segment.
    let plan = FaultPlan::parse_all(&["REPLAY:segment=NOC:kind=PING:nth=2".to_string()]).unwrap();
    let mut net = SimNet::new(plan, DetRng::from_seed(5), Transport::Inproc).unwrap();

    for i in 0..3 {
        let body = format!("ping {i}");
        let deliveries = net.send("left", "right", Segment::Noc, "PING", body.as_bytes()).unwrap();
        for d in &deliveries {
            println!(
                "delivered {} {} -> {}: {}",
                d.kind,
                d.from,
                d.to,
                String::from_utf8_lossy(&d.body)
            );
        }
    }
    // Sends: 3. Deliveries: 4, because the fault re-delivered one envelope
    // under a fresh sequence number.
    println!("PING envelopes on the wire: {}", count_kind(net.envelopes(), "PING"));

    println!("\ntranscript, one line per envelope:");
    for line in net.transcript_text().lines() {
        println!("  {line}");
    }

    // A held envelope: DELAY keeps it back until two more deliveries have
    // happened on its segment, or until the net is flushed.
    let plan = FaultPlan::parse_all(&["DELAY:kind=SLOW:nth=1:window=2".to_string()]).unwrap();
    let mut net = SimNet::new(plan, DetRng::from_seed(6), Transport::Inproc).unwrap();
    let first = net.send("a", "b", Segment::Noc, "SLOW", b"held").unwrap();
    println!("\nimmediately delivered: {}", first.len());
    let second = net.send("a", "b", Segment::Noc, "FAST", b"one").unwrap();
    let third = net.send("a", "b", Segment::Noc, "FAST", b"two").unwrap();
    println!(
        "after two more sends: {} then {} (the held one surfaced: {})",
        second.len(),
        third.len(),
        third.iter().any(|d| d.kind == "SLOW")
    );

    // The socket transport pushes every body through a real loopback TCP
    // connection; contents and transcripts come out identical.
    let mut inproc = SimNet::new(FaultPlan::default(), DetRng::from_seed(7), Transport::Inproc)
        .unwrap();
    let mut socket = SimNet::new(FaultPlan::default(), DetRng::from_seed(7), Transport::Socket)
        .unwrap();
    for net in [&mut inproc, &mut socket] {
        net.send("a", "b", Segment::TaRs, "MSG", b"same bytes either way").unwrap();
    }
    println!(
        "\nsocket and in-process transcripts identical: {}",
        inproc.transcript_text() == socket.transcript_text()
    );
}
