use bcounter::sim::{run, Strategy};
use bcounter::ReplicaId;
use bcounter_bench::{diverged, short_run, spread};

#[test]
fn spread_divides_rights() {
    let c = spread(4, 100);
    assert_eq!(c.value(), 100);
    assert_eq!(c.local_rights(ReplicaId(1)).unwrap(), 25);
    assert_eq!(c.local_rights(ReplicaId(0)).unwrap(), 25);
}

#[test]
fn diverged_states_merge_to_both_sides() {
    let (a, b) = diverged(5, 100);
    assert!(!a.leq(&b).unwrap() && !b.leq(&a).unwrap());
    let m = a.merged(&b).unwrap();
    assert_eq!(m.value(), 105);
}

#[test]
fn short_run_completes() {
    let r = run(&short_run(Strategy::Bcsrv, 10)).unwrap().report;
    assert!(r.succeeded > 0);
    assert_eq!(r.violations, 0);
}
