//! Property tests for the link hierarchy.

use std::collections::BTreeSet;

use proptest::prelude::*;
use serde_json::json;

use stratsim::cluster::{ClusterSpec, LinkLevel};
use stratsim::parse_cluster;

fn clusters() -> impl Strategy<Value = ClusterSpec> {
    (
        1usize..=4,
        prop::sample::select(vec![1usize, 2, 4, 8]),
        1usize..=2,
        prop::sample::select(vec![8e9, 12e9, 150e9]),
        prop::sample::select(vec![9.6e9, 40e9]),
        prop::sample::select(vec![12.5e9, 25e9]),
        prop::option::of(prop::sample::select(vec![10e9, 300e9])),
        1u32..=2,
    )
        .prop_map(|(nodes, dpn, sockets, intra, qpi, nic, port, links)| {
            let sockets = sockets.min(dpn);
            let mut v = json!({
                "n_nodes": nodes,
                "devices_per_node": dpn,
                "device_type": "X",
                "device_memory": 1u64 << 34,
                "intra_node_link": {"class": "pcie", "bandwidth": intra, "alpha": 1e-6},
                "inter_socket_link": {"bandwidth": qpi},
                "nic": {"bandwidth": nic},
                "sockets_per_node": sockets,
                "links_per_level": {"intra_node": links, "inter_socket": 1, "nic": links},
            });
            if let Some(p) = port {
                v["device_port_bandwidth"] = json!(p);
            }
            parse_cluster(&v.to_string()).expect("generated cluster is valid")
        })
}

fn group(c: &ClusterSpec, picks: &[usize]) -> Vec<usize> {
    let n = c.n_devices();
    picks.iter().map(|p| p % n).collect::<BTreeSet<_>>().into_iter().collect()
}

proptest! {
    #[test]
    fn common_level_is_symmetric_and_node_major(c in clusters(), a in 0usize..64, b in 0usize..64) {
        let n = c.n_devices();
        let (a, b) = (a % n, b % n);
        let l = c.lowest_common_level(a, b);
        prop_assert_eq!(l, c.lowest_common_level(b, a));
        let same_node = a / c.devices_per_node == b / c.devices_per_node;
        prop_assert_eq!(l == LinkLevel::Nic, !same_node);
        prop_assert_eq!(l == LinkLevel::DevicePort, a == b);
        if same_node && a != b {
            let socket = |d: usize| (d % c.devices_per_node) * c.sockets_per_node / c.devices_per_node;
            let want = if socket(a) == socket(b) { LinkLevel::IntraNode } else { LinkLevel::InterSocket };
            prop_assert_eq!(l, want);
        }
    }

    #[test]
    fn aggregate_is_bounded_and_shrinks_when_group_grows(
        c in clusters(),
        picks in prop::collection::vec(0usize..64, 2..6),
        extra in 0usize..64,
    ) {
        let g = group(&c, &picks);
        prop_assume!(g.len() >= 2);
        let ch = c.channels(&g).unwrap();
        let ports = g.len() as f64 * c.port_bandwidth();
        prop_assert!(ch.aggregate <= ports);
        prop_assert!(ch.aggregate > 0.0);
        let sum: f64 = ch.channels.iter().map(|x| x.bandwidth).sum();
        prop_assert!((sum - ch.aggregate).abs() <= 1e-9 * ch.aggregate);
        let mut bigger = g.clone();
        bigger.push(extra % c.n_devices());
        let bigger = group(&c, &bigger);
        let wide = c.channels(&bigger).unwrap();
        prop_assert!(wide.aggregate <= ch.aggregate, "{:?} -> {:?}", ch, wide);
    }

    #[test]
    fn one_group_shares_nothing(c in clusters(), picks in prop::collection::vec(0usize..64, 1..6)) {
        let g = group(&c, &picks);
        let s = c.shared_links(&[g]);
        prop_assert_eq!(s.len(), 1);
        prop_assert!(s[0].values().all(|&k| k == 1), "{:?}", s);
    }

    #[test]
    fn disjoint_intra_socket_pairs_share_the_fabric(c in clusters()) {
        // every adjacent pair inside one socket of node 0
        let per = c.devices_per_node / c.sockets_per_node;
        prop_assume!(per >= 4);
        let groups = vec![vec![0, 1], vec![2, 3]];
        let s = c.shared_links(&groups);
        prop_assert_eq!(s[0][&LinkLevel::IntraNode], 2);
        prop_assert_eq!(s[0][&LinkLevel::DevicePort], 1);
    }
}

#[test]
fn invalid_clusters_are_rejected() {
    let base = json!({
        "n_nodes": 2, "devices_per_node": 4, "device_type": "X", "device_memory": 1024,
        "intra_node_link": {"class": "nvlink", "bandwidth": 1e9},
        "nic": {"bandwidth": 1e9},
    });
    assert!(parse_cluster(&base.to_string()).is_ok());
    for (key, field, v) in [
        ("nic", Some("bandwidth"), json!(0.0)),
        ("intra_node_link", Some("bandwidth"), json!(-1.0)),
        ("n_nodes", None, json!(0)),
        ("sockets_per_node", None, json!(5)),
        ("device_port_bandwidth", None, json!(0.0)),
    ] {
        let mut bad = base.clone();
        match field {
            Some(f) => bad[key][f] = v,
            None => bad[key] = v,
        }
        assert!(parse_cluster(&bad.to_string()).is_err(), "{key} accepted");
    }
    let mut no_nic = base.clone();
    no_nic.as_object_mut().unwrap().remove("nic");
    assert!(parse_cluster(&no_nic.to_string()).is_err());
}
