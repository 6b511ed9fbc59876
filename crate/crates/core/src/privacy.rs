//! Observer views and the linkage attacks run against them.
//!
//! An external observer sees the blocks of the two permissionless chains,
//! every anchor, and the envelope of each L1 transaction: when it happened,
//! which contracts it connected, its payload length and any amount moved.
//! It never sees the brokers' chain state. Insiders additionally know what
//! their own sessions learned.
//!
//! Both attacks try to answer "which seller contract sold to which buyer
//! contract". Accuracy is the fraction of true pairs they recover.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::crypto::{Nonce, PublicKey};
use crate::ledger::{AnchorTx, ChainBlock, ChainKind};
use crate::sim::{SimError, Simulation, BROKERS_CHAIN, BUYERS_CHAIN, SELLERS_CHAIN};
use crate::trace::{EventType, TradeTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Kind {
    Request,
    Transfer,
    Anchor,
}

/// The publicly visible envelope of one L1 transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct L1Observation {
    pub epoch: u64,
    pub seq: u64,
    pub kind: L1Kind,
    pub chain: Option<String>,
    pub from: Option<String>,
    pub to: Option<String>,
    pub payload_len: u64,
    pub amount: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsiderSession {
    pub session: String,
    pub own_key: PublicKey,
    pub own_nonce: Nonce,
    /// What the match notice told a seller about its buyer.
    pub peer_key: Option<PublicKey>,
    pub peer_nonce: Option<Nonce>,
    /// Epochs in which this session did something.
    pub epochs: Vec<u64>,
}

/// Legitimate knowledge of one market participant about its own trades.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsiderKnowledge {
    pub agent: String,
    pub contract: String,
    pub sessions: Vec<InsiderSession>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObserverRole {
    External,
    Insider(InsiderKnowledge),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ObserverView {
    pub seller_chain_blocks: Vec<ChainBlock>,
    pub buyer_chain_blocks: Vec<ChainBlock>,
    pub anchor_txs: Vec<AnchorTx>,
    pub l1: Vec<L1Observation>,
    pub insider: Option<InsiderKnowledge>,
}

/// Builds the view from public trace fields only. Simulator ground truth
/// (step, session, trade, detail) is dropped here.
pub fn build_observer_view(trace: &TradeTrace, role: ObserverRole) -> ObserverView {
    let public = |name: &str| trace.chains.get(name) == Some(&ChainKind::Permissionless);
    let blocks = |name: &str| {
        if public(name) {
            trace.blocks.get(name).cloned().unwrap_or_default()
        } else {
            Vec::new()
        }
    };
    let l1 = trace
        .events
        .iter()
        .filter(|e| e.l1_tx)
        .map(|e| L1Observation {
            epoch: e.epoch,
            seq: e.seq,
            kind: match e.event_type {
                EventType::CrossChainTransfer => L1Kind::Transfer,
                EventType::Anchor => L1Kind::Anchor,
                _ => L1Kind::Request,
            },
            chain: e.chain.clone(),
            from: e.from.clone(),
            to: e.to.clone(),
            payload_len: e.payload_len,
            amount: e.amount,
        })
        .collect();
    ObserverView {
        seller_chain_blocks: blocks(SELLERS_CHAIN),
        buyer_chain_blocks: blocks(BUYERS_CHAIN),
        anchor_txs: trace.anchors.clone(),
        l1,
        insider: match role {
            ObserverRole::External => None,
            ObserverRole::Insider(k) => Some(k),
        },
    }
}

impl ObserverView {
    fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.l1).expect("observations serialize");
        Sha256::digest(bytes).into()
    }
}

/// Guessed buyer contract to seller contract links.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageGuess(pub BTreeMap<String, String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    Timing,
    Size,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown attack `{0}` (expected timing or size)")]
pub struct UnknownAttack(pub String);

impl FromStr for Attack {
    type Err = UnknownAttack;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "timing" => Ok(Attack::Timing),
            "size" => Ok(Attack::Size),
            other => Err(UnknownAttack(other.to_string())),
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attack::Timing => "timing",
            Attack::Size => "size",
        })
    }
}

impl Attack {
    pub const ALL: [Attack; 2] = [Attack::Timing, Attack::Size];

    pub fn run(self, view: &ObserverView) -> LinkageGuess {
        match self {
            Attack::Timing => timing_attack(view),
            Attack::Size => size_attack(view),
        }
    }
}

fn on_chain(label: &Option<String>, chain: &str) -> bool {
    label
        .as_deref()
        .and_then(|l| l.split_once('/'))
        .is_some_and(|(c, _)| c == chain)
}

fn requests<'a>(view: &'a ObserverView, from: &'a str, to: &'a str) -> impl Iterator<Item = &'a L1Observation> {
    view.l1
        .iter()
        .filter(move |o| o.kind == L1Kind::Request && on_chain(&o.from, from) && on_chain(&o.to, to))
}

/// Pairs the i-th seller with the i-th buyer.
fn zip_ranks(sellers: Vec<String>, buyers: Vec<String>) -> LinkageGuess {
    LinkageGuess(buyers.into_iter().zip(sellers).collect())
}

/// FIFO across the broker: the k-th seller to hand its delivery to the
/// broker is assumed to be the k-th buyer to receive one.
pub fn timing_attack(view: &ObserverView) -> LinkageGuess {
    let mut last_out: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for o in requests(view, SELLERS_CHAIN, BROKERS_CHAIN) {
        last_out.insert(o.from.as_deref().expect("filtered"), (o.epoch, o.seq));
    }
    let mut last_in: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for o in requests(view, BROKERS_CHAIN, BUYERS_CHAIN) {
        last_in.insert(o.to.as_deref().expect("filtered"), (o.epoch, o.seq));
    }
    let order = |m: BTreeMap<&str, (u64, u64)>| {
        let mut v: Vec<(&str, (u64, u64))> = m.into_iter().collect();
        v.sort_by_key(|(_, t)| *t);
        v.into_iter().map(|(l, _)| l.to_string()).collect::<Vec<_>>()
    };
    zip_ranks(order(last_out), order(last_in))
}

/// Matches sell and buy requests by length rank; equal lengths are ordered
/// at random.
pub fn size_attack(view: &ObserverView) -> LinkageGuess {
    let first = |from: &str, key: fn(&L1Observation) -> &Option<String>| {
        let mut seen = BTreeMap::new();
        for o in requests(view, from, BROKERS_CHAIN) {
            seen.entry(key(o).clone().expect("filtered")).or_insert(o.payload_len);
        }
        seen.into_iter().collect::<Vec<(String, u64)>>()
    };
    let mut rng = ChaCha20Rng::from_seed(view.digest());
    let mut rank = |mut v: Vec<(String, u64)>| {
        v.shuffle(&mut rng);
        v.sort_by_key(|(_, len)| *len);
        v.into_iter().map(|(l, _)| l).collect::<Vec<_>>()
    };
    let sellers = rank(first(SELLERS_CHAIN, |o| &o.from));
    let buyers = rank(first(BUYERS_CHAIN, |o| &o.from));
    zip_ranks(sellers, buyers)
}

/// True (seller contract, buyer contract) pairs of a run.
pub fn ground_truth(trace: &TradeTrace) -> Vec<(String, String)> {
    trace
        .events_of(EventType::TradeMatched)
        .filter_map(|e| Some((e.from.clone()?, e.to.clone()?)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn correct_links(guess: &LinkageGuess, truth: &[(String, String)]) -> usize {
    truth
        .iter()
        .filter(|(s, b)| guess.0.get(b) == Some(s))
        .count()
}

pub fn linkage_accuracy(guess: &LinkageGuess, truth: &[(String, String)]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    correct_links(guess, truth) as f64 / truth.len() as f64
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z * Z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mitigations {
    pub padding: Option<bool>,
    pub batching: Option<bool>,
}

impl Mitigations {
    pub fn of(cfg: &ScenarioConfig) -> Self {
        Mitigations {
            padding: Some(cfg.padding),
            batching: Some(cfg.batching),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: Attack,
    /// True pairs per run (mean over runs).
    pub n_trades: f64,
    pub n_runs: usize,
    pub mean_accuracy: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub mitigations: Mitigations,
    /// Pooled correct links and true pairs over all runs.
    pub correct: usize,
    pub links: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AttackReport {
    pub fn from_counts(attack: Attack, runs: &[(usize, usize)], mitigations: Mitigations) -> Self {
        let correct: usize = runs.iter().map(|r| r.0).sum();
        let links: usize = runs.iter().map(|r| r.1).sum();
        let n_runs = runs.len();
        let mean = if links == 0 { 0.0 } else { correct as f64 / links as f64 };
        let (lo, hi, warning) = if n_runs < 2 {
            (mean, mean, Some(format!("{n_runs} run(s): interval is degenerate")))
        } else {
            let (lo, hi) = wilson_interval(correct, links);
            (lo, hi, None)
        };
        AttackReport {
            attack,
            n_trades: if n_runs == 0 { 0.0 } else { links as f64 / n_runs as f64 },
            n_runs,
            mean_accuracy: mean,
            ci95_low: lo,
            ci95_high: hi,
            mitigations,
            correct,
            links,
            warning,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// (correct links, true pairs) of one attack against one trace.
pub fn evaluate(trace: &TradeTrace, attack: Attack) -> (usize, usize) {
    let view = build_observer_view(trace, ObserverRole::External);
    let truth = ground_truth(trace);
    (correct_links(&attack.run(&view), &truth), truth.len())
}

/// Runs `n_runs` simulations with seeds `cfg.seed + i` in parallel and
/// scores every attack on each.
pub fn monte_carlo(cfg: &ScenarioConfig, attacks: &[Attack], n_runs: usize) -> Result<Vec<AttackReport>, SimError> {
    let per_run: Vec<Vec<(usize, usize)>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            let mut sim = Simulation::new(c)?;
            sim.run()?;
            let trace = sim.trace();
            Ok(attacks.iter().map(|a| evaluate(&trace, *a)).collect())
        })
        .collect::<Result<_, SimError>>()?;
    Ok(attacks
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let counts: Vec<(usize, usize)> = per_run.iter().map(|r| r[j]).collect();
            AttackReport::from_counts(*a, &counts, Mitigations::of(cfg))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn req(epoch: u64, seq: u64, from: &str, to: &str, len: u64) -> L1Observation {
        L1Observation {
            epoch,
            seq,
            kind: L1Kind::Request,
            chain: None,
            from: Some(from.into()),
            to: Some(to.into()),
            payload_len: len,
            amount: None,
        }
    }

    fn truth(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(s, b)| (s.to_string(), b.to_string())).collect()
    }

    #[test]
    fn accuracy_edges() {
        let t = truth(&[("sellers/0", "buyers/0"), ("sellers/1", "buyers/1")]);
        let perfect = LinkageGuess(t.iter().map(|(s, b)| (b.clone(), s.clone())).collect());
        assert_eq!(linkage_accuracy(&perfect, &t), 1.0);
        assert_eq!(linkage_accuracy(&LinkageGuess::default(), &t), 0.0);
        assert_eq!(linkage_accuracy(&perfect, &[]), 0.0);
    }

    #[test]
    fn timing_attack_follows_fifo_order() {
        let view = ObserverView {
            l1: vec![
                req(9, 1, "sellers/1", "brokers/0", 1024),
                req(9, 2, "sellers/0", "brokers/0", 1024),
                req(10, 5, "brokers/0", "buyers/1", 1024),
                req(10, 6, "brokers/0", "buyers/0", 1024),
            ],
            ..Default::default()
        };
        let g = timing_attack(&view);
        assert_eq!(g.0["buyers/1"], "sellers/1");
        assert_eq!(g.0["buyers/0"], "sellers/0");
    }

    #[test]
    fn size_attack_uses_first_request_lengths() {
        let view = ObserverView {
            l1: vec![
                req(1, 0, "sellers/0", "brokers/0", 300),
                req(1, 1, "sellers/1", "brokers/0", 310),
                req(1, 2, "buyers/0", "brokers/0", 90),
                req(1, 3, "buyers/1", "brokers/0", 80),
                req(9, 4, "sellers/0", "brokers/0", 5),
            ],
            ..Default::default()
        };
        let g = size_attack(&view);
        assert_eq!(g.0["buyers/1"], "sellers/0");
        assert_eq!(g.0["buyers/0"], "sellers/1");
    }

    #[test]
    fn single_trade_is_always_linked() {
        let cfg = ScenarioConfig {
            n_sellers: 1,
            n_buyers: 1,
            ..Default::default()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run().unwrap();
        let trace = sim.trace();
        for a in Attack::ALL {
            assert_eq!(evaluate(&trace, a), (1, 1), "{a}");
        }
    }

    #[test]
    fn external_view_has_no_consortium_state() {
        let mut sim = Simulation::new(ScenarioConfig::default()).unwrap();
        sim.run().unwrap();
        let trace = sim.trace();
        let view = build_observer_view(&trace, ObserverRole::External);
        assert!(!view.seller_chain_blocks.is_empty());
        assert!(!view.buyer_chain_blocks.is_empty());
        let leaked = serde_json::to_string(&view).unwrap();
        // Broker state is written under "trade/<id>" keys.
        for b in trace.blocks[BROKERS_CHAIN].iter().flat_map(|b| &b.mutations) {
            assert!(!view
                .seller_chain_blocks
                .iter()
                .chain(&view.buyer_chain_blocks)
                .any(|x| x.mutations.iter().any(|m| m.key == b.key)));
        }
        assert!(!leaked.contains("\"step\""));
        assert!(view.insider.is_none());
    }

    #[test]
    fn unknown_attack_name() {
        assert_eq!("timing".parse::<Attack>(), Ok(Attack::Timing));
        assert_eq!("dns".parse::<Attack>(), Err(UnknownAttack("dns".into())));
    }

    #[test]
    fn single_run_report_warns() {
        let r = AttackReport::from_counts(Attack::Timing, &[(1, 16)], Mitigations::of(&ScenarioConfig::default()));
        assert!(r.warning.is_some());
        assert_eq!(r.ci95_low, r.ci95_high);
        let r = AttackReport::from_counts(Attack::Timing, &[(1, 16), (2, 16)], Mitigations::of(&ScenarioConfig::default()));
        assert!(r.warning.is_none());
        assert!(r.ci95_low < r.mean_accuracy && r.mean_accuracy < r.ci95_high);
    }

    #[test]
    fn wilson_matches_reference_values() {
        // 10 of 100: textbook interval (0.0552, 0.1744).
        let (lo, hi) = wilson_interval(10, 100);
        assert!((lo - 0.0552).abs() < 1e-4, "{lo}");
        assert!((hi - 0.1744).abs() < 1e-4, "{hi}");
    }

    proptest! {
        /// A uniformly random matching of n pairs gets 1 right on average.
        #[test]
        fn random_matching_expectation(n in 2usize..12, seed in any::<u64>()) {
            let t: Vec<(String, String)> = (0..n).map(|i| (format!("sellers/{i}"), format!("buyers/{i}"))).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let runs = 400;
            let mut total = 0usize;
            for _ in 0..runs {
                let mut sellers: Vec<String> = t.iter().map(|p| p.0.clone()).collect();
                sellers.shuffle(&mut rng);
                let g = zip_ranks(sellers, t.iter().map(|p| p.1.clone()).collect());
                total += correct_links(&g, &t);
            }
            let mean = total as f64 / runs as f64;
            // Fixed points of a random permutation: mean 1, variance 1.
            prop_assert!((mean - 1.0).abs() < 5.0 / (runs as f64).sqrt(), "mean {}", mean);
        }

        #[test]
        fn accuracy_is_a_fraction(links in proptest::collection::btree_map(0u8..20, 0u8..20, 0..20)) {
            let t: Vec<(String, String)> = (0..20u8).map(|i| (format!("s{i}"), format!("b{i}"))).collect();
            let g = LinkageGuess(links.into_iter().map(|(b, s)| (format!("b{b}"), format!("s{s}"))).collect());
            let a = linkage_accuracy(&g, &t);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
