//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use datamarket::agents::{BuyerState, SellerState};
use datamarket::broker::TradeState;
use datamarket::config::{FaultSpec, ScenarioConfig};
use datamarket::agents::Fault;
use datamarket::crypto::sym_decrypt;
use datamarket::metrics::{account_trade, throughput, CostReport, HAPPY_PATH_L1_TXS};
use datamarket::privacy::{monte_carlo, Attack};
use datamarket::protocol::{encode, SensorType};
use datamarket::sim::Simulation;
use datamarket::trace::{EventType, TradeTrace};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn pairs(n: u32) -> ScenarioConfig {
    ScenarioConfig {
        n_sellers: n,
        n_buyers: n,
        ..Default::default()
    }
}

fn run(cfg: ScenarioConfig) -> Result<(Simulation, TradeTrace), String> {
    let mut sim = Simulation::new(cfg).map_err(|e| e.to_string())?;
    let out = sim.run().map_err(|e| e.to_string())?;
    ensure!(out.quiescent, "run did not reach quiescence in {} epochs", out.epochs);
    let t = sim.trace();
    Ok((sim, t))
}

fn fault(agent: &str, fault: Fault) -> FaultSpec {
    FaultSpec {
        agent: agent.into(),
        fault,
        trade: 0,
    }
}

fn end_to_end() -> Check {
    let start = Instant::now();
    let (sim, _) = run(pairs(8))?;
    let elapsed = start.elapsed();
    ensure!(sim.settled_trades() == 8, "{} of 8 trades settled", sim.settled_trades());
    for (s, b) in sim.sellers().iter().zip(sim.buyers()) {
        ensure!(s.state() == SellerState::Settled, "{} ended {:?}", s.id, s.state());
        ensure!(b.state() == BuyerState::Scored, "{} ended {:?}", b.id, b.state());
        let original = s.current().unwrap().data.to_bytes();
        let got = b.current().unwrap().received.as_deref();
        ensure!(got == Some(original.as_slice()), "{} recovered different bytes", b.id);
    }
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("8/8 settled, plaintexts equal, {:.2}s", elapsed.as_secs_f64()))
}

fn payment_integrity() -> Check {
    let cfg = pairs(8);
    let prices = cfg.prices.clone();
    let (sim, trace) = run(cfg)?;
    let mut checked = 0;
    for b in sim.buyers() {
        let sess = b.current().unwrap();
        let id = sess.trade.ok_or("buyer never invoiced")?;
        let expected = prices.0[&sess.dd.sensor_type] * sess.dd.volume;
        let amount_at = |step: u8| {
            trace
                .events
                .iter()
                .find(|e| e.trade == Some(id) && e.step == Some(step) && e.l1_tx)
                .and_then(|e| e.amount)
        };
        let debit = amount_at(7);
        let credit = amount_at(18);
        ensure!(
            debit == Some(expected) && credit == Some(expected),
            "trade {}: debit {debit:?}, credit {credit:?}, expected {expected}",
            id.0
        );
        checked += 1;
    }
    let l = sim.ledger();
    ensure!(l.total_supply() == l.minted(), "supply {} vs minted {}", l.total_supply(), l.minted());
    // Rebuild every balance from the trace alone.
    let mut balance: BTreeMap<String, i128> = BTreeMap::new();
    for e in trace.events.iter().filter(|e| e.l1_tx && e.from.is_some()) {
        let from = e.from.clone().unwrap();
        *balance.entry(from).or_default() -= i128::from(e.gas + e.amount.unwrap_or(0));
        if let Some(to) = &e.to {
            *balance.entry(to.clone()).or_default() += i128::from(e.amount.unwrap_or(0));
        }
    }
    let initial = |label: &str| match label.split('/').next() {
        Some("sellers") => sim.config().balances.seller,
        Some("buyers") => sim.config().balances.buyer,
        _ => sim.config().balances.broker,
    };
    for (label, delta) in &balance {
        let addr = sim
            .sellers()
            .iter()
            .map(|s| s.contract)
            .chain(sim.buyers().iter().map(|b| b.contract))
            .chain(sim.brokers().iter().map(|b| b.address()))
            .find(|c| &l.label(datamarket::ledger::Endpoint::Contract(*c)) == label)
            .ok_or(format!("unknown contract {label}"))?;
        let want = i128::from(initial(label)) + delta;
        ensure!(i128::from(l.balance(addr)) == want, "{label}: ledger {} vs trace {want}", l.balance(addr));
    }
    Ok(format!("{checked} trades exact, supply conserved at {}", l.minted()))
}

fn early_settlement() -> Check {
    let cfg = ScenarioConfig {
        faults: vec![fault("buyer-0", Fault::SilentBuyer)],
        ..pairs(1)
    };
    let timeout = cfg.timeouts.score;
    let (sim, trace) = run(cfg)?;
    let t = sim.brokers()[0].trades().next().ok_or("no trade")?;
    ensure!(t.state == TradeState::Settled, "trade ended {}", t.state);
    ensure!(t.score.is_none(), "silent buyer scored");
    let seller = sim.sellers()[0].current().unwrap();
    ensure!(seller.credited == t.price, "seller credited {} of {}", seller.credited, t.price);
    ensure!(
        !trace.events.iter().any(|e| e.step == Some(17)),
        "a score was forwarded"
    );
    let at = |d: &str| {
        trace
            .events
            .iter()
            .find(|e| e.event_type == EventType::TradeState && e.detail.as_deref() == Some(d))
            .map(|e| e.epoch)
    };
    let (delivered, settled) = (at("delivered").unwrap(), at("settled").unwrap());
    ensure!(settled - delivered == timeout, "settled {} epochs after delivery", settled - delivered);
    Ok(format!("settled {timeout} epochs after delivery, seller credited {}", t.price))
}

fn replay_defense() -> Check {
    let cfg = ScenarioConfig {
        faults: vec![fault("seller-0", Fault::ReplaySell), fault("seller-1", Fault::StaleNonce)],
        ..pairs(2)
    };
    let (sim, trace) = run(cfg)?;
    let rejected = trace
        .events_of(EventType::OrderRejected)
        .filter(|e| e.detail.as_deref() == Some("DuplicateOrder"))
        .count();
    ensure!(rejected == 1, "{rejected} DuplicateOrder rejections");
    let broker = &sim.brokers()[0];
    ensure!(broker.trades().count() == 2, "replay created a trade");
    let mismatch = trace
        .events_of(EventType::AgentError)
        .find(|e| e.detail.as_deref() == Some("NonceMismatch"))
        .ok_or("no NonceMismatch")?;
    let stale = mismatch.trade.ok_or("mismatch not tied to a trade")?;
    ensure!(broker.trade(stale).unwrap().state == TradeState::Expired, "stale trade not expired");
    let settlement = trace
        .events
        .iter()
        .any(|e| e.trade == Some(stale) && e.step == Some(18));
    ensure!(!settlement, "stale trade paid the seller");
    ensure!(sim.sellers()[1].current().unwrap().credited == 0, "seller-1 credited");
    ensure!(sim.sellers()[1].state() == SellerState::Aborted, "seller-1 not aborted");
    let paid = trace
        .events
        .iter()
        .find(|e| e.trade == Some(stale) && e.step == Some(7))
        .and_then(|e| e.amount);
    let refunded = trace
        .events
        .iter()
        .find(|e| e.trade == Some(stale) && e.detail.as_deref() == Some("refund"))
        .and_then(|e| e.amount);
    ensure!(paid.is_some() && paid == refunded, "buyer paid {paid:?}, refunded {refunded:?}");
    Ok("replay -> DuplicateOrder, stale nonce -> NonceMismatch, no payout".into())
}

/// Central 95% interval of Binomial(n, p), by direct summation.
fn binomial_interval(n: u64, p: f64) -> (u64, u64) {
    let mut pmf = (n as f64 * (1.0 - p).ln()).exp();
    let mut cdf = 0.0;
    let mut lo = None;
    for k in 0..=n {
        cdf += pmf;
        if lo.is_none() && cdf >= 0.025 {
            lo = Some(k);
        }
        if cdf >= 0.975 {
            return (lo.unwrap(), k);
        }
        pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
    }
    (lo.unwrap_or(n), n)
}

fn privacy() -> Check {
    let start = Instant::now();
    let on = ScenarioConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/privacy_n16.json"))
        .map_err(|e| e.to_string())?;
    ensure!(on.padding && on.batching, "scenario must enable both mitigations");
    let runs = 200;
    let with = monte_carlo(&on, &Attack::ALL, runs).map_err(|e| e.to_string())?;
    let off = ScenarioConfig {
        padding: false,
        batching: false,
        ..on.clone()
    };
    let without = monte_carlo(&off, &Attack::ALL, runs).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let chance = 1.0 / 16.0;
    let mut notes = Vec::new();
    for r in &with {
        ensure!(r.links == 16 * runs, "{}: {} links", r.attack, r.links);
        let (lo, hi) = binomial_interval(r.links as u64, chance);
        ensure!(
            (lo..=hi).contains(&(r.correct as u64)),
            "{} with mitigations: {} correct outside [{lo}, {hi}]",
            r.attack,
            r.correct
        );
        notes.push(format!("{} {:.4}", r.attack, r.mean_accuracy));
    }
    let best = without
        .iter()
        .max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy))
        .unwrap();
    ensure!(
        best.mean_accuracy > 3.0 * chance,
        "without mitigations best attack reaches only {:.4}",
        best.mean_accuracy
    );
    for r in &without {
        notes.push(format!("{} off {:.4}", r.attack, r.mean_accuracy));
    }
    ensure!(elapsed < Duration::from_secs(120), "Monte Carlo took {elapsed:?}");
    Ok(format!("{}; {:.1}s", notes.join(", "), elapsed.as_secs_f64()))
}

fn cost_accounting() -> Check {
    // Oracle: on-ledger hops of one trade, listed by step.
    let hops = [2, 2, 4, 7, 8, 12, 13, 17, 18];
    ensure!(hops.len() as u64 == HAPPY_PATH_L1_TXS, "constant drifted");
    let (sim, trace) = run(pairs(4))?;
    let report = CostReport::from_trace(&trace);
    ensure!(report.trades.len() == 4, "{} trades accounted", report.trades.len());
    for c in &report.trades {
        ensure!(c.l1_tx_count == HAPPY_PATH_L1_TXS, "trade {}: {} L1 txs", c.trade.0, c.l1_tx_count);
        ensure!(c.gas_to_price_ratio <= 0.1, "trade {}: ratio {}", c.trade.0, c.gas_to_price_ratio);
        let mut steps: Vec<u8> = trace
            .events
            .iter()
            .filter(|e| e.l1_tx && e.trade == Some(c.trade))
            .filter_map(|e| e.step)
            .collect();
        steps.sort();
        ensure!(steps == hops[2..], "trade {} matched-phase steps {steps:?}", c.trade.0);
    }
    ensure!(
        trace.events_of(EventType::OffLedgerRequest).all(|e| !e.l1_tx && e.gas == 0),
        "an off-ledger request was an L1 tx"
    );
    let counters = sim.ledger().counters();
    ensure!(
        counters.l1_txs() == trace.l1_tx_count() as u64,
        "ledger counted {}, trace {}",
        counters.l1_txs(),
        trace.l1_tx_count()
    );
    let silent = ScenarioConfig {
        faults: vec![fault("buyer-0", Fault::SilentBuyer)],
        ..pairs(1)
    };
    let (_, st) = run(silent)?;
    let c = account_trade(&st, st.events_of(EventType::TradeMatched).next().unwrap().trade.unwrap())
        .map_err(|e| e.to_string())?;
    ensure!(c.l1_tx_count == HAPPY_PATH_L1_TXS - 1, "silent buyer trade: {} L1 txs", c.l1_tx_count);
    let worst = report.trades.iter().map(|c| c.gas_to_price_ratio).fold(0.0, f64::max);
    Ok(format!("{HAPPY_PATH_L1_TXS} L1 txs per trade, worst ratio {worst:.4}"))
}

fn scalability() -> Check {
    let at = |n: u32| -> Result<f64, String> {
        let cfg = ScenarioConfig {
            max_epochs: 40,
            ..pairs(n)
        };
        let (sim, trace) = run(cfg)?;
        ensure!(sim.settled_trades() == n as usize, "{} of {n} settled", sim.settled_trades());
        Ok(throughput(&trace))
    };
    let (one, two) = (at(16)?, at(32)?);
    let ratio = two / one;
    ensure!((ratio - 2.0).abs() <= 0.1, "throughput {one:.4} -> {two:.4}, ratio {ratio:.4}");
    Ok(format!("{one:.4} -> {two:.4} trades/epoch, ratio {ratio:.3}"))
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn containment() -> Check {
    let scenarios = [
        pairs(4),
        ScenarioConfig {
            padding: false,
            batching: false,
            ..pairs(4)
        },
        ScenarioConfig {
            faults: vec![fault("seller-0", Fault::BogusKey), fault("buyer-1", Fault::SilentBuyer)],
            market: datamarket::config::MarketConfig {
                sensor_types: vec![SensorType::Traffic, SensorType::Energy],
                ..Default::default()
            },
            ..pairs(3)
        },
    ];
    let mut needles_checked = 0;
    for cfg in scenarios {
        let (sim, trace) = run(cfg)?;
        let mut artifacts: Vec<(&str, Vec<u8>)> = vec![("trace", trace.to_jsonl())];
        for blocks in trace.blocks.values() {
            for b in blocks {
                for m in &b.mutations {
                    artifacts.push(("block", [m.key.clone(), m.value.clone()].concat()));
                }
            }
        }
        for a in &trace.anchors {
            artifacts.push(("anchor", a.state_commitment.to_vec()));
        }
        for (_, blob) in sim.store().iter() {
            artifacts.push(("blob", blob.to_vec()));
        }
        let mut needles: Vec<(String, Vec<u8>)> = Vec::new();
        for s in sim.sellers() {
            for sess in s.sessions() {
                let raw = sess.data.to_bytes();
                needles.push((format!("{} data", s.id), raw.clone()));
                // Any 16-byte stretch of readings would do; take the first.
                needles.push((format!("{} readings", s.id), raw[13..29.min(raw.len())].to_vec()));
                if let Some(k) = &sess.data_key {
                    needles.push((format!("{} K_s", s.id), k.0.to_vec()));
                    // The stored blob must be the sealed data, not the data.
                    let blob = sim.store().get(&sess.blob.unwrap()).unwrap();
                    ensure!(sym_decrypt(k, blob).ok().as_deref() == Some(raw.as_slice()), "blob mismatch");
                }
                needles.push((format!("{} DD", s.id), encode(&sess.dd)));
                needles.push((format!("{} region", s.id), sess.dd.region.0.clone().into_bytes()));
            }
        }
        for b in sim.buyers() {
            for sess in b.sessions() {
                needles.push((format!("{} DD", b.id), encode(&sess.dd)));
            }
        }
        for (what, needle) in &needles {
            for (kind, hay) in &artifacts {
                ensure!(!contains(hay, needle), "{what} found in {kind}");
            }
            needles_checked += 1;
        }
    }
    Ok(format!("{needles_checked} secrets absent from blocks, anchors, blobs and traces"))
}

fn determinism() -> Check {
    let cfg = ScenarioConfig {
        faults: vec![fault("seller-1", Fault::ReplaySell)],
        seller_choice: true,
        ..pairs(6)
    };
    let (_, a) = run(cfg.clone())?;
    let (_, b) = run(cfg.clone())?;
    let (a, b) = (a.to_jsonl(), b.to_jsonl());
    ensure!(a == b, "traces differ");
    let (_, c) = run(ScenarioConfig { seed: cfg.seed + 1, ..cfg })?;
    ensure!(c.to_jsonl() != a, "seed has no effect");
    Ok(format!("{} identical bytes", a.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 end-to-end correctness", end_to_end),
        ("2 payment integrity", payment_integrity),
        ("3 early settlement", early_settlement),
        ("4 replay defense", replay_defense),
        ("5 privacy quantification", privacy),
        ("6 cost accounting", cost_accounting),
        ("7 scalability", scalability),
        ("8 plaintext containment", containment),
        ("9 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(note) => println!("PASS  {name}: {note}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
