use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ioconsent::beacon::{self, BeaconEndpoint, RadioBus, Scanner};
use ioconsent::pdc::{decide, ConsentRule, ControllerScope, RuleDuration, RuleScope};
use ioconsent::policy::{decode_policy, encode_policy};
use ioconsent::registry::{Registry, Role, TokenEntry, TokenTable};
use ioconsent::sample::{self, OpKind};
use ioconsent::scenario::{self, Transport};
use ioconsent::semantics::{apply, verify_trace};
use ioconsent::state::{DeviceId, Position};

fn policies(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<_> = (0..256)
        .map(|_| {
            let a = sample::policy(&mut rng);
            let b = sample::weaken(&mut rng, &a);
            (a, b)
        })
        .collect();
    c.bench_function("policy/implies x256", |b| {
        b.iter(|| pairs.iter().filter(|(x, y)| black_box(x).implies(black_box(y))).count())
    });
    let p = sample::wide_policy(&mut rng);
    let bytes = encode_policy(&p).unwrap();
    c.bench_function("policy/encode", |b| b.iter(|| encode_policy(black_box(&p)).unwrap()));
    c.bench_function("policy/decode", |b| b.iter(|| decode_policy(black_box(&bytes)).unwrap()));
}

fn beacons(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let decl = sample::declaration(&mut rng);
    let frames: Vec<Vec<u8>> = beacon::encode_declaration(&decl)
        .unwrap()
        .iter()
        .map(|f| f.to_bytes())
        .collect();
    c.bench_function("beacon/encode", |b| b.iter(|| beacon::encode_declaration(black_box(&decl)).unwrap()));
    c.bench_function("beacon/scan", |b| {
        b.iter_batched(
            Scanner::new,
            |mut s| frames.iter().filter_map(|f| s.receive(f)).count(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("beacon/tick 64 scanners", |b| {
        let mut bus = RadioBus::new();
        for i in 0..64 {
            bus.add_scanner(Some(Position::from_cm(i * 50, 0)));
        }
        let mut endpoint = BeaconEndpoint::new(decl.clone(), 0).unwrap();
        b.iter(|| {
            let now = endpoint.next_due();
            endpoint.tick(now, &mut bus).len()
        })
    });
}

fn semantics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = sample::universe(&mut rng, 6, 12);
    let walked = u.state(&mut rng, 200, true);
    let st = u.prime(&mut rng, &walked);
    let ops: Vec<_> = (0..256)
        .map(|i| u.operation(&mut rng, &st, OpKind::ALL[i % 7], true))
        .collect();
    c.bench_function("semantics/apply x256", |b| {
        b.iter(|| ops.iter().filter(|op| apply(black_box(&st), op).unwrap().1.is_applied()).count())
    });
    let script = scenario::bundled("anpr_basic").unwrap();
    let trace = scenario::run(&script, 7, Transport::Registry).unwrap().trace;
    c.bench_function("semantics/verify anpr_basic", |b| b.iter(|| verify_trace(black_box(&trace)).unwrap()));
}

fn registry(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tokens = TokenTable::new(vec![TokenEntry { token: "t".into(), principal: "dc".into(), role: Role::Dc }]);
    let reg = Arc::new(Registry::new(tokens));
    for i in 0..200 {
        let mut profile = sample::declaration(&mut rng).profile;
        profile.position = sample::position(&mut rng, 20_000);
        reg.put_device(Some("t"), DeviceId::from_label(&format!("d{i}")).unwrap(), profile)
            .unwrap();
    }
    let center = Position::from_meters(10.0, -20.0);
    c.bench_function("registry/nearby 200", |b| b.iter(|| reg.nearby(black_box(&center), 25.0).unwrap().len()));
}

fn custodian(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let decl = sample::declaration(&mut rng);
    let mut rules: Vec<ConsentRule> = (0..31)
        .map(|_| {
            let scope = RuleScope {
                data_type: decl.profile.data_type,
                controller: ControllerScope::Id("SOMEONE-ELSE".into()),
                purposes: Default::default(),
            };
            ConsentRule::positive(scope, sample::policy(&mut rng), RuleDuration::Permanent)
        })
        .collect();
    rules.push(ConsentRule::positive(
        RuleScope { data_type: decl.profile.data_type, controller: ControllerScope::Any, purposes: Default::default() },
        decl.profile.policy.clone(),
        RuleDuration::Permanent,
    ));
    c.bench_function("pdc/decide 32 rules", |b| b.iter(|| decide(black_box(&rules), &decl, 0)));
}

fn scenarios(c: &mut Criterion) {
    let mut group = c.benchmark_group("scenario");
    group.sample_size(20);
    for name in ["anpr_basic", "mall_walk", "meeting_room"] {
        let script = scenario::bundled(name).unwrap();
        for transport in [Transport::Beacon, Transport::Registry] {
            group.bench_function(format!("{name}/{transport:?}"), |b| {
                b.iter(|| scenario::run(&script, 7, transport).unwrap().trace.len())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, policies, beacons, semantics, registry, custodian, scenarios);
criterion_main!(benches);
