//! Reference values computed with an independent SHA-256/HMAC implementation.

use proptest::prelude::*;
use toolweave_net::announce::{Announcement, ToolSummary};
use toolweave_net::crypto::{
    decrypt_announcement, derive_group_key_material, encrypt_announcement, membership_proof, verify_proof, GroupKey, KeyRing,
};

#[test]
fn zero_secret_derivation() {
    let k = derive_group_key_material(&[0; 32]).unwrap();
    assert_eq!(k.key_id, "66687aadf862bd77");
    assert_eq!(hex::encode(k.enc_key), "6112c93e342bee03388e10e5251029968451dfa52ed927077e23b8d38bb85a97");
    assert_eq!(hex::encode(k.mac_key), "f6df15b72b5ef867909aa4c4efaea553dfff56efd21dae468656e180dbb4cfd8");
}

#[test]
fn counting_secret_key_id() {
    let secret: Vec<u8> = (0..32).collect();
    assert_eq!(derive_group_key_material(&secret).unwrap().key_id, "630dcd2966c43366");
}

#[test]
fn proof_vector() {
    let k = derive_group_key_material(&[0; 32]).unwrap();
    let nonce: Vec<u8> = (0..16).collect();
    // SHA-256 of "{}"
    let digest: [u8; 32] = hex::decode("44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a").unwrap().try_into().unwrap();
    let tag = membership_proof(&k.mac_key, &nonce, &digest);
    assert_eq!(hex::encode(tag), "416ddf66e529be6c7f9d562df9a80f3a0d6d38dd1281a02d1ff3d7e8c69999c4");
    assert!(verify_proof(&k.mac_key, &nonce, &digest, &tag));
}

fn summary(name: &str) -> ToolSummary {
    ToolSummary { name: name.into(), version: "1.0".into(), inputs: vec![], outputs: vec![], documentation_digest: String::new() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_the_same_secret_opens(a in any::<[u8; 32]>(), b in any::<[u8; 32]>(), payload in proptest::collection::vec(any::<u8>(), 0..256)) {
        prop_assume!(a != b);
        let ka = derive_group_key_material(&a).unwrap();
        let kb = derive_group_key_material(&b).unwrap();
        let sealed = encrypt_announcement(&payload, &ka.enc_key);
        prop_assert_eq!(decrypt_announcement(&sealed, &ka.enc_key).unwrap(), payload);
        prop_assert!(decrypt_announcement(&sealed, &kb.enc_key).is_err());
    }

    #[test]
    fn sealed_announcements_hide_the_tool(secret in any::<[u8; 32]>(), name in "[a-z]{3,12}") {
        let key = GroupKey::from_secret("g", &secret).unwrap();
        let a = Announcement::publish("n1", Some(&key), &summary(&name), 1);
        prop_assert!(a.payload.is_none());
        let text = serde_json::to_string(&a).unwrap();
        let quoted = format!("\"{name}\"");
        prop_assert!(!text.contains(&quoted));
        let mut ring = KeyRing::new();
        prop_assert!(a.open(&ring).is_none());
        ring.insert(key);
        prop_assert_eq!(a.open(&ring).unwrap().name, name);
    }
}
