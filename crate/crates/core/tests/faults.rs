use datamarket::agents::{BuyerState, Fault, SellerState, BAD_SCORE};
use datamarket::broker::TradeState;
use datamarket::config::{Balances, FaultSpec, ScenarioConfig};
use datamarket::sim::Simulation;
use datamarket::trace::{EventType, TradeTrace};

fn one_pair(faults: Vec<FaultSpec>) -> ScenarioConfig {
    ScenarioConfig {
        n_sellers: 1,
        n_buyers: 1,
        faults,
        ..Default::default()
    }
}

fn on(agent: &str, fault: Fault) -> FaultSpec {
    FaultSpec {
        agent: agent.into(),
        fault,
        trade: 0,
    }
}

fn run(cfg: ScenarioConfig) -> (Simulation, TradeTrace) {
    let mut sim = Simulation::new(cfg).unwrap();
    let out = sim.run().unwrap();
    assert!(out.quiescent);
    let t = sim.trace();
    (sim, t)
}

fn agent_errors(t: &TradeTrace) -> Vec<String> {
    t.events_of(EventType::AgentError).filter_map(|e| e.detail.clone()).collect()
}

#[test]
fn bogus_key_earns_a_zero_score() {
    let (sim, t) = run(one_pair(vec![on("seller-0", Fault::BogusKey)]));
    let b = &sim.buyers()[0];
    assert_eq!(b.current().unwrap().score, Some(BAD_SCORE));
    assert!(b.current().unwrap().received.is_none());
    assert!(agent_errors(&t).iter().any(|e| e == "DecryptFailure"));
    let broker = &sim.brokers()[0];
    let trade = broker.trades().next().unwrap();
    assert_eq!(trade.state, TradeState::Settled);
    assert_eq!(trade.score, Some(BAD_SCORE));
    let row = &broker.reputation().rows()[0];
    assert_eq!(row.mean, 0.0);
}

#[test]
fn inflated_invoice_is_refused() {
    let (sim, t) = run(one_pair(vec![on("buyer-0", Fault::InflatedInvoice)]));
    assert!(agent_errors(&t).iter().any(|e| e.starts_with("PriceMismatch")));
    assert!(!t.events.iter().any(|e| e.step == Some(7)));
    let trade = sim.brokers()[0].trades().next().unwrap();
    assert_eq!(trade.state, TradeState::Expired);
    assert_eq!(sim.brokers()[0].escrow(), 0);
    assert_eq!(sim.buyers()[0].state(), BuyerState::Aborted);
    assert_eq!(sim.sellers()[0].current().unwrap().credited, 0);
}

#[test]
fn poor_buyer_cannot_pay() {
    let cfg = ScenarioConfig {
        balances: Balances {
            buyer: 3,
            ..Default::default()
        },
        ..one_pair(vec![])
    };
    let (sim, t) = run(cfg);
    assert_eq!(sim.settled_trades(), 0);
    assert!(agent_errors(&t).iter().any(|e| e.starts_with("InsufficientFunds")));
    assert_eq!(sim.ledger().total_supply(), sim.ledger().minted());
}

#[test]
fn expired_certificate_blocks_new_trades() {
    let cfg = ScenarioConfig {
        cert_validity: 20,
        trades_per_agent: 3,
        ..one_pair(vec![])
    };
    let (sim, t) = run(cfg);
    assert!(agent_errors(&t).iter().any(|e| e == "CertExpiredLocally"));
    assert!(sim.settled_trades() >= 1);
    assert!(sim.settled_trades() < 3);
}

#[test]
fn sequential_trades_all_settle() {
    let (sim, _) = run(ScenarioConfig {
        trades_per_agent: 3,
        ..one_pair(vec![])
    });
    assert_eq!(sim.settled_trades(), 3);
    assert_eq!(sim.sellers()[0].sessions().len(), 3);
    assert!(sim.sellers()[0].sessions().iter().all(|s| s.state == SellerState::Settled));
    let nonces: std::collections::BTreeSet<_> =
        sim.sellers()[0].sessions().iter().map(|s| s.nonce).collect();
    assert_eq!(nonces.len(), 3);
}

#[test]
fn fault_on_second_trade_only() {
    let mut cfg = ScenarioConfig {
        trades_per_agent: 2,
        ..one_pair(vec![on("buyer-0", Fault::SilentBuyer)])
    };
    cfg.faults[0].trade = 1;
    let (sim, t) = run(cfg);
    assert_eq!(sim.settled_trades(), 2);
    assert_eq!(t.events.iter().filter(|e| e.step == Some(17)).count(), 1);
}

#[test]
fn fault_for_missing_agent_is_rejected() {
    let cfg = one_pair(vec![on("seller-5", Fault::BogusKey)]);
    assert!(cfg.validate().is_err());
}

#[test]
fn settlement_is_visible_as_a_cross_chain_transfer() {
    let (sim, t) = run(one_pair(vec![]));
    let settle = t.events.iter().find(|e| e.step == Some(18)).unwrap();
    assert_eq!(settle.event_type, EventType::CrossChainTransfer);
    let price = sim.brokers()[0].trades().next().unwrap().price;
    assert_eq!(settle.amount, Some(price));
    assert_eq!(sim.sellers()[0].current().unwrap().credited, price);
}
