use std::time::Duration;

use bytes::Bytes;
use sha2::{Digest, Sha256};
use spmon_bus::client::{connect, Client, ClientError, ClientOptions, ConnState, Event, Inbox};
use spmon_bus::net::{spawn_broker, BrokerHandle, BrokerOptions, Endpoint};

const WAIT: Duration = Duration::from_secs(5);

async fn broker(name: &str, parent: Option<Endpoint>) -> BrokerHandle {
    let mut opts = BrokerOptions::new(name);
    opts.listen.push("tcp://127.0.0.1:0".parse().unwrap());
    opts.parent = parent;
    spawn_broker(opts).await.unwrap()
}

fn ep(b: &BrokerHandle) -> Endpoint {
    b.endpoints()[0].clone()
}

async fn client(b: &BrokerHandle, name: &str) -> (Client, Inbox) {
    connect(ClientOptions::new(ep(b), name)).await.unwrap()
}

async fn next(inbox: &mut Inbox) -> Event {
    tokio::time::timeout(WAIT, inbox.recv()).await.expect("event in time").unwrap()
}

async fn nothing_within(inbox: &mut Inbox, d: Duration) {
    if let Ok(ev) = tokio::time::timeout(d, inbox.recv()).await {
        panic!("unexpected {ev:?}");
    }
}

/// Waits until `root` knows `name`, so cross-broker sends can be routed.
async fn routed(root: &BrokerHandle, name: &str) {
    for _ in 0..500 {
        if root.routes().iter().any(|n| n == name) {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("{name} never reached the root");
}

#[tokio::test]
async fn fresh_name_becomes_ready() {
    let b = broker("r", None).await;
    let (c, _) = client(&b, "mon1").await;
    assert_eq!(c.state(), ConnState::Ready);
    assert_eq!(c.name(), "mon1");
}

#[tokio::test]
async fn duplicate_name_is_taken() {
    let b = broker("r", None).await;
    let _a = client(&b, "mon1").await;
    let err = connect(ClientOptions::new(ep(&b), "mon1")).await.err().unwrap();
    assert!(matches!(err, ClientError::NameTaken(n) if n == "mon1"));
}

#[tokio::test]
async fn empty_name_rejected_locally() {
    let b = broker("r", None).await;
    assert!(matches!(connect(ClientOptions::new(ep(&b), "")).await, Err(ClientError::EmptyName)));
}

#[tokio::test]
async fn unreachable_endpoint_fails_to_connect() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    let err = connect(ClientOptions::new(Endpoint::Tcp(addr.to_string()), "x")).await.err().unwrap();
    assert!(matches!(err, ClientError::ConnectFailed(_)));
}

#[tokio::test]
async fn silent_server_times_out_registration() {
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    tokio::spawn(async move {
        let (_s, _) = l.accept().await.unwrap();
        tokio::time::sleep(Duration::from_secs(30)).await;
    });
    let mut opts = ClientOptions::new(Endpoint::Tcp(addr.to_string()), "x");
    opts.register_timeout = Duration::from_millis(200);
    assert!(matches!(connect(opts).await, Err(ClientError::Timeout(_))));
}

#[tokio::test]
async fn send_to_self_loops_through_broker() {
    let b = broker("r", None).await;
    let (c, mut inbox) = client(&b, "me").await;
    c.send("me", &b"echo"[..]).await.unwrap();
    assert_eq!(next(&mut inbox).await, Event::Direct { src: "me".into(), data: Bytes::from_static(b"echo") });
}

#[tokio::test]
async fn one_mebibyte_payload_arrives_intact() {
    let b = broker("r", None).await;
    let (a, _) = client(&b, "a").await;
    let (_c, mut inbox) = client(&b, "c").await;
    let payload: Vec<u8> = (0..(1 << 20)).map(|i: u32| (i.wrapping_mul(2_654_435_761) >> 13) as u8).collect();
    let want = Sha256::digest(&payload);
    a.send("c", payload).await.unwrap();
    let (src, data) = tokio::time::timeout(WAIT, inbox.receive()).await.unwrap().unwrap();
    assert_eq!(src, "a");
    assert_eq!(Sha256::digest(&data), want);
}

#[tokio::test]
async fn unknown_destination_surfaces_no_route() {
    let b = broker("r", None).await;
    let (a, mut inbox) = client(&b, "a").await;
    a.send("ghost", &b"?"[..]).await.unwrap();
    assert_eq!(next(&mut inbox).await, Event::NoRoute { dest: "ghost".into() });
}

#[tokio::test]
async fn interleaved_senders_keep_per_sender_order() {
    let b = broker("r", None).await;
    let (s1, _) = client(&b, "s1").await;
    let (s2, _) = client(&b, "s2").await;
    let (_d, mut inbox) = client(&b, "d").await;
    let n = 2000u32;
    let t1 = tokio::spawn(async move {
        for i in 0..n {
            s1.send("d", i.to_be_bytes().to_vec()).await.unwrap();
        }
    });
    let t2 = tokio::spawn(async move {
        for i in 0..n {
            s2.send("d", i.to_be_bytes().to_vec()).await.unwrap();
        }
    });
    t1.await.unwrap();
    t2.await.unwrap();
    let mut next_seq = [0u32; 2];
    for _ in 0..2 * n {
        let Event::Direct { src, data } = next(&mut inbox).await else { panic!() };
        let k = usize::from(src == "s2");
        assert_eq!(u32::from_be_bytes(data[..].try_into().unwrap()), next_seq[k], "{src}");
        next_seq[k] += 1;
    }
}

#[tokio::test]
async fn subscribe_publish_unsubscribe() {
    let b = broker("r", None).await;
    let (sub, mut inbox) = client(&b, "sub").await;
    let (publ, _) = client(&b, "pub").await;
    sub.subscribe("risk.").await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    publ.publish("risk.link1", &b"0.02"[..]).await.unwrap();
    assert_eq!(
        next(&mut inbox).await,
        Event::Publication { topic: "risk.link1".into(), src: "pub".into(), data: Bytes::from_static(b"0.02") }
    );
    sub.unsubscribe("risk.").await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    publ.publish("risk.link1", &b"0.03"[..]).await.unwrap();
    nothing_within(&mut inbox, Duration::from_millis(200)).await;
}

#[tokio::test]
async fn empty_prefix_is_a_wildcard() {
    let b = broker("r", None).await;
    let (sub, mut inbox) = client(&b, "sub").await;
    let (publ, _) = client(&b, "pub").await;
    sub.subscribe("").await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    for t in ["a", "zz", "rate.link1"] {
        publ.publish(t, &b""[..]).await.unwrap();
    }
    for t in ["a", "zz", "rate.link1"] {
        let Event::Publication { topic, .. } = next(&mut inbox).await else { panic!() };
        assert_eq!(topic, t);
    }
}

#[tokio::test]
async fn empty_topic_is_refused() {
    let b = broker("r", None).await;
    let (c, _) = client(&b, "c").await;
    assert!(matches!(c.publish("", &b"x"[..]).await, Err(ClientError::EmptyTopic)));
}

#[tokio::test]
async fn broker_death_disconnects_client() {
    let b = broker("r", None).await;
    let (c, mut inbox) = client(&b, "c").await;
    let started = std::time::Instant::now();
    b.shutdown();
    let res = tokio::time::timeout(Duration::from_secs(7), inbox.recv()).await.expect("within 6 s");
    assert!(matches!(res, Err(ClientError::Disconnected)));
    assert!(started.elapsed() < Duration::from_secs(6));
    assert_eq!(c.state(), ConnState::Disconnected);
    assert!(matches!(c.send("x", &b""[..]).await, Err(ClientError::NotConnected)));
}

#[tokio::test]
async fn reconnect_restores_name_and_subscriptions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dd.sock");
    let endpoint = Endpoint::Local(path.clone());
    let start = || async {
        let mut opts = BrokerOptions::new("r");
        opts.listen.push(Endpoint::Local(path.clone()));
        spawn_broker(opts).await.unwrap()
    };
    let b = start().await;
    let (sub, mut inbox) = connect(ClientOptions::new(endpoint.clone(), "sub").reconnect(true)).await.unwrap();
    sub.subscribe("alarm.").await.unwrap();
    b.shutdown();
    tokio::time::timeout(WAIT, sub.wait_for(ConnState::Disconnected)).await.unwrap();

    let b = start().await;
    tokio::time::timeout(Duration::from_secs(10), sub.wait_for(ConnState::Ready)).await.unwrap();
    let (publ, _) = connect(ClientOptions::new(endpoint, "pub")).await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    publ.publish("alarm.policy", &b"!"[..]).await.unwrap();
    publ.send("sub", &b"hi"[..]).await.unwrap();
    let mut got = [next(&mut inbox).await, next(&mut inbox).await];
    got.sort_by_key(|e| format!("{e:?}"));
    assert!(matches!(&got[0], Event::Direct { src, .. } if src == "pub"));
    assert!(matches!(&got[1], Event::Publication { topic, .. } if topic == "alarm.policy"));
    b.shutdown();
}

#[tokio::test]
async fn tree_over_tcp_routes_between_subtrees() {
    let root = broker("root", None).await;
    let b1 = broker("b1", Some(ep(&root))).await;
    let b2 = broker("b2", Some(ep(&root))).await;
    let (a, mut a_in) = client(&b1, "a").await;
    let (_c, mut c_in) = client(&b2, "c").await;
    routed(&root, "c").await;
    routed(&root, "a").await;
    assert!(b1.has_parent() && b2.has_parent());
    a.send("c", &b"across"[..]).await.unwrap();
    assert_eq!(next(&mut c_in).await, Event::Direct { src: "a".into(), data: Bytes::from_static(b"across") });
    // The same name cannot be claimed in another subtree.
    let err = connect(ClientOptions::new(ep(&b2), "a")).await.err().unwrap();
    assert!(matches!(err, ClientError::NameTaken(_)));
    a.send("nobody", &b""[..]).await.unwrap();
    assert_eq!(next(&mut a_in).await, Event::NoRoute { dest: "nobody".into() });
}

#[tokio::test]
async fn stats_topic_reports_link_counters() {
    let mut opts = BrokerOptions::new("r");
    opts.listen.push("tcp://127.0.0.1:0".parse().unwrap());
    opts.stats_topic = Some("stats.r".into());
    let b = spawn_broker(opts).await.unwrap();
    let (c, mut inbox) = client(&b, "watcher").await;
    c.subscribe("stats.").await.unwrap();
    let ev = tokio::time::timeout(Duration::from_secs(3), inbox.recv()).await.unwrap().unwrap();
    let Event::Publication { topic, src, data } = ev else { panic!() };
    assert_eq!((topic.as_str(), src.as_str()), ("stats.r", "r"));
    let v: serde_json::Value = serde_json::from_slice(&data).unwrap();
    assert!(v.as_array().unwrap().iter().any(|s| s["peer"] == "watcher"));
}
