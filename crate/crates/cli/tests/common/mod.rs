//! Strategies shared by the codec tests and the acceptance run.

use metasched::wire::{MsgType, WireMessage};
use proptest::prelude::*;
use serde_json::{Map, Value};

pub fn json_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        any::<u64>().prop_map(Value::from),
        (-1e12f64..1e12).prop_map(Value::from),
        ".{0,12}".prop_map(Value::from),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            proptest::collection::btree_map(".{0,6}", inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

pub fn message() -> impl Strategy<Value = WireMessage> {
    (
        proptest::sample::select(MsgType::ALL.to_vec()),
        ".{0,16}",
        proptest::collection::btree_map("[a-z_]{1,10}", json_value(), 0..6),
    )
        .prop_map(|(kind, id, payload)| WireMessage::new(kind, id, payload.into_iter().collect::<Map<_, _>>()))
}
