mod common;

use edgecloud::catalog::{AppSpec, Catalog};
use edgecloud::generate::placement_case;
use edgecloud::ids::NodeId;
use edgecloud::scheduler::{PlacementRequest, ScheduleError, Scheduler, Thresholds};
use edgecloud::topology::{Node, ResourceVector, Tier, Topology};
use proptest::prelude::*;

use common::oracles::brute_force_place;

fn rv(cpu: u64, mem: u64) -> ResourceVector {
    ResourceVector::new(cpu, mem, 1024)
}

fn three_nodes() -> (Topology, Catalog) {
    let mut t = Topology::new();
    t.add_node(Node::with_default_capacity("gw", Tier::Gateway)).unwrap();
    t.add_node(Node::new("e1", Tier::EdgeModule, rv(4000, 8192))).unwrap();
    t.add_node(Node::new("e2", Tier::EdgeModule, rv(4000, 8192))).unwrap();
    t.add_link(&"gw".into(), &"e1".into(), 3, 100).unwrap();
    t.add_link(&"gw".into(), &"e2".into(), 3, 100).unwrap();
    let mut c = Catalog::new();
    c.register_app(AppSpec::data_app("a", ResourceVector::new(1000, 2048, 0), Some(10), 4.0, 5.0)).unwrap();
    (t, c)
}

fn place(t: &mut Topology, c: &Catalog, app: &str, source: &str, replicas: u32) -> Option<NodeId> {
    let mut s = Scheduler::new(Thresholds::default());
    match s.place(t, c, PlacementRequest::new(app, source, replicas)) {
        Ok(i) => Some(i.host.clone()),
        Err(ScheduleError::Unschedulable { .. }) => None,
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn equal_latency_prefers_more_free_capacity() {
    let (mut t, c) = three_nodes();
    t.reserve(&"e1".into(), &ResourceVector::new(1000, 0, 0)).unwrap();
    let app = c.app(&"a".into()).unwrap();
    assert_eq!(brute_force_place(&t, app, &"gw".into(), 1), Some("e2".into()));
    assert_eq!(place(&mut t, &c, "a", "gw", 1), Some("e2".into()));
}

#[test]
fn full_tie_goes_to_smallest_id() {
    let (mut t, c) = three_nodes();
    let app = c.app(&"a".into()).unwrap();
    assert_eq!(brute_force_place(&t, app, &"gw".into(), 1), Some("e1".into()));
    assert_eq!(place(&mut t, &c, "a", "gw", 1), Some("e1".into()));
}

#[test]
fn infeasible_request_is_unschedulable_for_both() {
    let (mut t, c) = three_nodes();
    let app = c.app(&"a".into()).unwrap();
    assert_eq!(brute_force_place(&t, app, &"gw".into(), 5), None);
    assert_eq!(place(&mut t, &c, "a", "gw", 5), None);
}

#[test]
fn single_feasible_node_is_chosen() {
    let (mut t, c) = three_nodes();
    t.node_down(&"e1".into()).unwrap();
    let app = c.app(&"a".into()).unwrap();
    assert_eq!(brute_force_place(&t, app, &"gw".into(), 1), Some("e2".into()));
    assert_eq!(place(&mut t, &c, "a", "gw", 1), Some("e2".into()));
}

#[test]
fn latency_bound_excludes_the_far_node() {
    let (mut t, mut c) = three_nodes();
    t.add_node(Node::with_default_capacity("cloud", Tier::CentralCloud)).unwrap();
    t.add_link(&"e1".into(), &"cloud".into(), 20, 1000).unwrap();
    c.register_app(AppSpec::data_app("tight", ResourceVector::new(100_000, 1024, 0), Some(10), 1.0, 1.0))
        .unwrap();
    // Only the cloud has the cpu, but it is 23 ms away.
    let app = c.app(&"tight".into()).unwrap();
    assert_eq!(brute_force_place(&t, app, &"gw".into(), 1), None);
    assert_eq!(place(&mut t, &c, "tight", "gw", 1), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn scheduler_agrees_with_oracle(seed in any::<u64>()) {
        let mut case = placement_case(seed, 8, 4);
        let mut sched = Scheduler::new(Thresholds::default());
        for req in case.requests.clone() {
            let app = case.catalog.app(&req.app).unwrap().clone();
            let expected = brute_force_place(&case.topology, &app, &req.source, req.replicas);
            let got = match sched.place(&mut case.topology, &case.catalog, req) {
                Ok(i) => Some(i.host.clone()),
                Err(ScheduleError::Unschedulable { .. }) => None,
                Err(e) => panic!("{e}"),
            };
            prop_assert_eq!(got, expected);
        }
    }
}
