use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ioconsent::policy::{ControllerCategory, Policy, Purpose, Recipient};
use ioconsent::registry::{
    BackgroundServer, ConsentSubmission, HttpClient, Registry, RegistryApi, RegistryError,
    RegistryPoller, Role, TokenEntry, TokenTable,
};
use ioconsent::sample;
use ioconsent::state::{DataType, DeviceId, DeviceProfile, Position, Range, SubjectDeviceId};

fn tokens() -> TokenTable {
    TokenTable::new(vec![
        TokenEntry { token: "mall".into(), principal: "mall-operator".into(), role: Role::Dc },
        TokenEntry { token: "shop".into(), principal: "shop-operator".into(), role: Role::Dc },
        TokenEntry { token: "alice".into(), principal: "alice".into(), role: Role::Ds },
    ])
}

fn server() -> BackgroundServer {
    BackgroundServer::start(Arc::new(Registry::new(tokens())), "127.0.0.1:0").unwrap()
}

fn client(s: &BackgroundServer, token: Option<&str>) -> HttpClient {
    HttpClient::new(&s.base_url(), token).unwrap()
}

fn tracker(x: f64, y: f64) -> DeviceProfile {
    DeviceProfile {
        position: Position::from_meters(x, y),
        range: Range::from_meters(12.0),
        data_type: DataType::MacAddress,
        policy: Policy {
            controller_id: "MALL-NORD".into(),
            controller_category: ControllerCategory::Retail,
            purposes: [Purpose::CountingVisitors].into_iter().collect(),
            retention: 7 * 86_400,
            recipients: [Recipient::ControllerOnly].into_iter().collect(),
            cross_border: false,
        },
    }
}

#[test]
fn put_then_get_roundtrips() {
    let s = server();
    let id = DeviceId::from_label("tracker-a").unwrap();
    let put = client(&s, Some("mall")).put_device(id, tracker(1.5, -2.0)).unwrap();
    let got = client(&s, None).get_device(&id).unwrap();
    assert_eq!(put, got);
    assert_eq!(got.profile(), tracker(1.5, -2.0));
    assert!(got.human_readable.contains("MALL-NORD"));
}

#[test]
fn writes_need_an_owning_dc_token() {
    let s = server();
    let id = DeviceId::from_label("tracker-a").unwrap();
    let err = client(&s, None).put_device(id, tracker(0.0, 0.0)).unwrap_err();
    assert!(matches!(err, RegistryError::Unauthorized));
    let err = client(&s, Some("nope")).put_device(id, tracker(0.0, 0.0)).unwrap_err();
    assert!(matches!(err, RegistryError::Unauthorized));
    let err = client(&s, Some("alice")).put_device(id, tracker(0.0, 0.0)).unwrap_err();
    assert!(matches!(err, RegistryError::Forbidden));

    client(&s, Some("mall")).put_device(id, tracker(0.0, 0.0)).unwrap();
    let err = client(&s, Some("shop")).put_device(id, tracker(9.0, 0.0)).unwrap_err();
    assert!(matches!(err, RegistryError::Forbidden));
    let err = client(&s, Some("shop")).delete_device(&id).unwrap_err();
    assert!(matches!(err, RegistryError::Forbidden));

    client(&s, Some("mall")).delete_device(&id).unwrap();
    let err = client(&s, None).get_device(&id).unwrap_err();
    assert!(matches!(err, RegistryError::NotFound));
}

#[test]
fn bad_requests_are_rejected() {
    let s = server();
    let id = DeviceId::from_label("tracker-a").unwrap();
    let mut empty = tracker(0.0, 0.0);
    empty.policy.purposes.clear();
    let err = client(&s, Some("mall")).put_device(id, empty).unwrap_err();
    assert!(matches!(err, RegistryError::BadRequest(_)));
    let err = client(&s, None).nearby(&Position::from_meters(0.0, 0.0), -1.0).unwrap_err();
    assert!(matches!(err, RegistryError::BadRequest(_)));

    let raw = reqwest::blocking::get(format!("{}/devices/not%20an%20id%21%21%21%21%21%21%21%21%21%21%21%21%21%21%21", s.base_url())).unwrap();
    assert_eq!(raw.status().as_u16(), 400);
    let body: serde_json::Value = raw.json().unwrap();
    assert!(body["error"].is_string());
}

#[test]
fn consents_flow_to_the_owner_only() {
    let s = server();
    let id = DeviceId::from_label("tracker-a").unwrap();
    let (mall, shop, alice) = (client(&s, Some("mall")), client(&s, Some("shop")), client(&s, Some("alice")));
    mall.put_device(id, tracker(0.0, 0.0)).unwrap();
    let sub = ConsentSubmission {
        device_id: id,
        subject: SubjectDeviceId::mac([2, 0, 0, 0, 0, 7]),
        policy: tracker(0.0, 0.0).policy,
        timestamp: 42,
    };
    let record = alice.post_consent(sub.clone()).unwrap();
    assert_eq!(record.token_id, "alice");

    let unknown = ConsentSubmission { device_id: DeviceId::from_label("ghost").unwrap(), ..sub.clone() };
    assert!(matches!(alice.post_consent(unknown).unwrap_err(), RegistryError::NotFound));
    assert!(matches!(client(&s, None).post_consent(sub).unwrap_err(), RegistryError::Unauthorized));

    let log = mall.get_consents(&id, 0).unwrap();
    assert_eq!(log, vec![record]);
    assert!(matches!(shop.get_consents(&id, 0).unwrap_err(), RegistryError::Forbidden));
    assert!(matches!(alice.get_consents(&id, 0).unwrap_err(), RegistryError::Forbidden));
}

#[test]
fn nearby_over_http_matches_scan() {
    let s = server();
    let mall = client(&s, Some("mall"));
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut placed = Vec::new();
    for i in 0..60 {
        let id = DeviceId::from_label(&format!("t{i}")).unwrap();
        let mut p = tracker(0.0, 0.0);
        p.position = sample::position(&mut r, 5_000);
        p.range = Range::from_decimeters(r.random_range(0..200));
        mall.put_device(id, p.clone()).unwrap();
        placed.push((id, p));
    }
    for _ in 0..40 {
        let center = sample::position(&mut r, 6_000);
        let radius = r.random_range(0..3_000) as f64 / 100.0;
        let got: BTreeSet<_> = mall.nearby(&center, radius).unwrap().into_iter().map(|x| x.device_id).collect();
        let want: BTreeSet<_> = placed
            .iter()
            .filter(|(_, p)| {
                let d = (p.position.x_meters() - center.x_meters()).hypot(p.position.y_meters() - center.y_meters());
                d <= radius + p.range.meters() + 1e-9
            })
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn poller_reports_changes_and_outages() {
    let s = server();
    let mall = client(&s, Some("mall"));
    let reader = client(&s, None);
    let id = DeviceId::from_label("tracker-a").unwrap();
    mall.put_device(id, tracker(0.0, 0.0)).unwrap();

    let mut poller = RegistryPoller::new(0).with_lookahead(5.0);
    let here = Position::from_meters(15.0, 0.0);
    let first = poller.poll(0, Some(here), &reader);
    assert!(first.error.is_none());
    assert_eq!(first.declarations.len(), 1);
    let again = poller.poll(poller.next_due(), Some(here), &reader);
    assert!(again.declarations.is_empty());

    let dead = HttpClient::new("http://127.0.0.1:9", None).unwrap();
    let due = poller.next_due();
    let failed = poller.poll(due, Some(here), &dead);
    assert!(failed.error.is_some());
    assert_eq!(poller.failures(), 1);
    assert!(poller.next_due() - due > poller.period_ms());
}
