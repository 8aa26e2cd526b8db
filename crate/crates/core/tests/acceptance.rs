//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`).
//!
//! Run with: cargo test -p qpc-core --test acceptance

use qpc_core::config::SystemConfig;
use qpc_core::experiments::{run_fig4, run_fig5, run_table2, Fig4Spec, Fig5Spec, Table2Spec};
use qpc_core::obfuscation::{
    decode_is, derive_is, seq_decrypt, seq_encrypt, MappingTable, Primitive, SeqDecKeys,
    SeqEncKeys,
};
use qpc_core::postproc::ldpc::{reconcile, LdpcCode};
use qpc_core::postproc::wcmac::{wc_mac_tag, wc_mac_verify, MacKey, MacTag};
use qpc_core::postproc::{key_rate, MAX_RECONCILABLE_QBER};
use qpc_core::primitives::lwe::{pq_decrypt, pq_encrypt, pq_keygen, LweParams};
use qpc_core::primitives::{
    aes_decrypt, aes_encrypt, aes_encrypt_block, generate_psk, AesKey, NonceLedger, Partition,
    PskLedger, QkdKeyPool,
};
use qpc_core::protocol::{
    default_psk, run_cycle_pair, session_pair, Mode, Phase, Session,
};
use qpc_core::timetag::Party;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::time::Instant;

fn criterion(name: &str, body: impl FnOnce() + UnwindSafe) {
    let start = Instant::now();
    match catch_unwind(body) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS ({:.1?})", start.elapsed()),
        Err(e) => {
            println!("ACCEPTANCE {name}: FAIL ({:.1?})", start.elapsed());
            resume_unwind(e);
        }
    }
}

fn hex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty()
        && needle.len() <= haystack.len()
        && haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn criterion_1_sync_recovery() {
    criterion("1 (sync recovery)", || {
        let spec = Fig5Spec::default(); // 10 ns offset, 1 ns/250 ms drift, 7 s
        assert_eq!(spec.source.clock_offset_ps, 10_000);
        assert!((spec.source.drift_rate - 4e-9).abs() < 1e-15);
        let result = run_fig5(&spec).unwrap();

        // Post-sync histogram (0.5 ns window) peaks within half a window
        // of zero delay.
        let peak = result
            .post
            .iter()
            .max_by_key(|&&(d, c)| (c, std::cmp::Reverse(d.ps().abs())))
            .unwrap();
        assert!(
            peak.0.ps().abs() <= 500,
            "post-sync histogram peaks at {} ps",
            peak.0.ps()
        );

        // Residual offset within one fine bin for at least 95% of rounds.
        assert_eq!(result.rounds.len(), 140, "7 s of 50 ms rounds");
        assert!(
            result.residual_within_bin >= 0.95,
            "residuals within one bin for only {:.1}% of rounds",
            result.residual_within_bin * 100.0
        );
    });
}

#[test]
fn criterion_2_key_rate_boundary() {
    criterion("2 (key-rate boundary)", || {
        let spec = Fig4Spec::default();
        assert_eq!(spec.code_rate, 0.5);
        let rows = run_fig4(&spec).unwrap();
        assert!(rows.len() >= 5);

        for r in &rows {
            if r.qber > MAX_RECONCILABLE_QBER {
                assert_eq!(
                    r.skr_bits_per_s, 0.0,
                    "skr must be exactly 0 at qber {:.4}",
                    r.qber
                );
            }
            if r.qber <= 0.09 {
                assert!(
                    r.skr_bits_per_s > 0.0,
                    "skr must be positive at qber {:.4}",
                    r.qber
                );
            }
        }
        // The sweep must actually straddle the boundary.
        assert!(rows.iter().any(|r| r.qber <= 0.09), "no point at/below 0.09");
        assert!(rows.iter().any(|r| r.qber > 0.1), "no point above 0.1");

        // Monotone non-decreasing error rate in jitter at fixed seed.
        for w in rows.windows(2) {
            assert!(
                w[1].qber >= w[0].qber,
                "qber not monotone: {:.4} then {:.4} at {} ps",
                w[0].qber,
                w[1].qber,
                w[1].jitter_ps
            );
        }
    });
}

#[test]
fn criterion_3_end_to_end_key_identity() {
    criterion("3 (end-to-end key identity)", || {
        let mut config = SystemConfig::default(); // desk scale: 2 s, ~8k pairs
        config.source.seed = 42;
        let table = MappingTable::standard_four();
        let psk = default_psk(Some(42));
        let (mut alice, mut bob) = session_pair(Mode::Hybrid, &config, &table, &psk).unwrap();

        // Entry 11 layers the pad over the expanded lattice ciphertext,
        // which no desk-scale key budget covers; the feasible entries
        // rotate here and entry 11 is exercised at the primitive level.
        let choices: [&[u8]; 3] = [&[0, 0], &[0, 1], &[1, 0]];
        let message = b"twenty cycles of key".to_vec();
        for cycle in 0..20 {
            bob.is_choice = Some(choices[cycle % 3].to_vec());
            let out = run_cycle_pair(&mut alice, &mut bob, &message);
            let a = out.alice.unwrap_or_else(|e| panic!("cycle {cycle} alice: {e}"));
            let b = out.bob.unwrap_or_else(|e| panic!("cycle {cycle} bob: {e}"));
            assert_eq!(a.delivered.as_deref(), Some(&message[..]), "cycle {cycle}");

            let q = a.qber.unwrap();
            assert!(
                (0.05..=0.10).contains(&q),
                "cycle {cycle}: qber {q:.4} outside [0.05, 0.10]"
            );

            // Whenever reconciliation succeeded the grown key length is
            // exactly ceil(r * N) for that session's estimate.
            for (si, stats) in b.session_stats.iter().enumerate() {
                if stats.grown > 0 {
                    let expected = key_rate(stats.q, 0.5, stats.n_reconciled, 1.0)
                        .unwrap()
                        .final_len;
                    assert_eq!(
                        stats.grown, expected,
                        "cycle {cycle} session {si}: grown != ceil(rN)"
                    );
                }
            }
            assert_eq!(a.session_stats, b.session_stats);
        }

        // The two pools are bit-identical after 20 cycles.
        assert_eq!(alice.pool.len_bits(), bob.pool.len_bits());
        assert_eq!(alice.pool.bits(), bob.pool.bits());
        assert!(alice.pool.len_bits() > 0);
        assert_eq!(alice.cycle_index, 20);
    });
}

#[test]
fn criterion_4_obfuscation_round_trip() {
    criterion("4 (obfuscation round trip)", || {
        let table = MappingTable::standard_four();
        let psk = generate_psk(64, 64, 512, Some(9));
        let mut bob_ledger = PskLedger::read_from(&psk[..]).unwrap();
        let mut alice_ledger = PskLedger::read_from(&psk[..]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        // derive -> decode recovers the sequence for all four entries, two
        // mask bits per cycle.
        for id in [[0u8, 0], [0, 1], [1, 0], [1, 1]] {
            let before = bob_ledger.consumed_bits(Partition::Pi);
            let (is, pi) = derive_is(&mut bob_ledger, &table, Some(&id), &mut rng).unwrap();
            let decoded = decode_is(&pi, &mut alice_ledger, &table).unwrap();
            assert_eq!(decoded, is);
            assert_eq!(bob_ledger.consumed_bits(Partition::Pi) - before, 2);
            assert_eq!(
                alice_ledger.consumed_bits(Partition::Pi),
                bob_ledger.consumed_bits(Partition::Pi)
            );
        }

        // Sequential encryption round-trips 1000 random messages across
        // the four entries. The lattice entries cost ~4000x per byte, so
        // they carry 100 trials each and short plaintexts; the other 800
        // trials run the cheap entries at up to 2 KiB.
        let params = LweParams::desk();
        let (pk, sk) = pq_keygen(&params, 31).unwrap();
        let pool_bits: Vec<u8> = (0..600_000).map(|_| rng.gen_range(0..=1u8)).collect();
        let aes_key = AesKey([0x42; 32]);
        let ids: [&[u8; 2]; 10] = [
            &[0, 0],
            &[0, 0],
            &[0, 0],
            &[0, 0],
            &[0, 1],
            &[0, 1],
            &[0, 1],
            &[0, 1],
            &[1, 0],
            &[1, 1],
        ];
        for trial in 0..1000usize {
            let id = *ids[trial % 10];
            let is = table.lookup(&id).unwrap().clone();
            let len = if is.contains(Primitive::PqEnc) {
                1 + trial % 16
            } else {
                1 + (trial * 37) % 2048
            };
            let msg: Vec<u8> = (0..len).map(|i| (trial + i) as u8).collect();

            let mut enc_pool = QkdKeyPool::with_bits(pool_bits.clone());
            let mut dec_pool = QkdKeyPool::with_bits(pool_bits.clone());
            let mut nonces = NonceLedger::new();
            let mut enc_rng = ChaCha8Rng::seed_from_u64(trial as u64);
            let mut enc = SeqEncKeys {
                otp_pool: &mut enc_pool,
                aes_key: Some(aes_key),
                nonce_ledger: &mut nonces,
                peer_pk: Some(&pk),
                rng: &mut enc_rng,
            };
            let c = seq_encrypt(&msg, &is, &mut enc).unwrap();
            let mut dec = SeqDecKeys {
                otp_pool: &mut dec_pool,
                aes_key: Some(aes_key),
                secret_key: Some(&sk),
            };
            let back = seq_decrypt(&c, &is, &mut dec).unwrap();
            assert_eq!(back, msg, "trial {trial} entry {id:?}");
            assert_eq!(enc_pool.consumed(), dec_pool.consumed());
        }
    });
}

#[test]
fn criterion_5_transcript_secrecy_audit() {
    criterion("5 (transcript secrecy audit)", || {
        let mut config = SystemConfig::default();
        config.source.seed = 77;
        config.source.duration = 1.0;
        let table = MappingTable::standard_four();
        let psk = default_psk(Some(77));
        let message = b"the instruction sequence stays private".to_vec();

        // Hybrid: no sensitive payload appears in the wire bytes.
        let (mut alice, mut bob) = session_pair(Mode::Hybrid, &config, &table, &psk).unwrap();
        bob.is_choice = Some(vec![0, 1]);
        let out = run_cycle_pair(&mut alice, &mut bob, &message);
        let a = out.alice.unwrap();
        out.bob.unwrap();
        let wire = bob.transcript().wire_bytes();
        assert!(!wire.is_empty());
        assert!(
            !contains(&wire, a.artifacts.is_canonical.as_bytes()),
            "sequence text leaked"
        );
        for needle in a
            .artifacts
            .alice_tick_payloads
            .iter()
            .chain(&a.artifacts.bob_tick_payloads)
        {
            assert!(!contains(&wire, needle), "time tags leaked");
        }
        for needle in &a.artifacts.bases_payloads {
            assert!(!contains(&wire, needle), "basis array leaked");
        }
        for needle in &a.artifacts.syndrome_payloads {
            assert!(!contains(&wire, needle), "syndrome leaked");
        }
        assert!(!contains(&wire, &message), "plaintext message leaked");

        // Baseline positive control: the same scan finds the cleartext
        // bases and syndrome.
        let (mut alice, mut bob) = session_pair(Mode::Baseline, &config, &table, &psk).unwrap();
        let out = run_cycle_pair(&mut alice, &mut bob, &message);
        let a = out.alice.unwrap();
        out.bob.unwrap();
        let wire = bob.transcript().wire_bytes();
        for needle in &a.artifacts.bases_payloads {
            assert!(contains(&wire, needle), "baseline bases not found");
        }
        for needle in &a.artifacts.syndrome_payloads {
            assert!(contains(&wire, needle), "baseline syndrome not found");
        }
    });
}

#[test]
fn criterion_6_primitive_oracles() {
    criterion("6 (primitive oracles)", || {
        // AES-256 core: FIPS-197 C.3 block vector, bit exact.
        let key = AesKey::from_bytes(&(0..32).collect::<Vec<u8>>());
        let pt: [u8; 16] = hex("00112233445566778899aabbccddeeff").try_into().unwrap();
        assert_eq!(
            aes_encrypt_block(&key, pt).to_vec(),
            hex("8ea2b7ca516745bfeafc49904b496089")
        );
        // SP 800-38A F.5.5 counter mode, first block.
        let key = AesKey::from_bytes(&hex(
            "603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4",
        ));
        let nonce: [u8; 16] = hex("f0f1f2f3f4f5f6f7f8f9fafbfcfdfeff").try_into().unwrap();
        let mut ledger = NonceLedger::new();
        let ct = aes_encrypt(
            &hex("6bc1bee22e409f96e93d7e117393172a"),
            &key,
            &nonce,
            &mut ledger,
        )
        .unwrap();
        assert_eq!(ct, hex("601ec313775789a5b7a7f504bbf3d228"));
        assert_eq!(
            aes_decrypt(&ct, &key, &nonce),
            hex("6bc1bee22e409f96e93d7e117393172a")
        );

        // Lattice encryption: zero failures over 10^3 random 256-bit
        // messages at desk parameters.
        let params = LweParams::desk();
        let (pk, sk) = pq_keygen(&params, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut failures = 0usize;
        for i in 0..1000u64 {
            let mut m = [0u8; 32];
            rng.fill_bytes(&mut m);
            let c = pq_encrypt(&m, &pk, i);
            if pq_decrypt(&c, &sk).unwrap() != m {
                failures += 1;
            }
        }
        assert_eq!(failures, 0, "{failures} lattice round-trip failures");

        // One-time MAC: 10^6 random forgeries, zero false accepts.
        let mac_key = MacKey {
            point: rng.gen(),
            mask: rng.gen(),
        };
        let msg = b"block 7 syndrome payload";
        let genuine = wc_mac_tag(msg, mac_key);
        let mut accepted = 0usize;
        for _ in 0..1_000_000u32 {
            let forged = MacTag(rng.gen());
            if forged != genuine && wc_mac_verify(msg, mac_key, forged) {
                accepted += 1;
            }
        }
        assert_eq!(accepted, 0, "{accepted} forgeries accepted");
    });
}

#[test]
fn criterion_7_reconciliation_performance() {
    criterion("7 (reconciliation performance)", || {
        let code = LdpcCode::shipped_4096();
        assert_eq!(code.n(), 4096);
        assert!((code.rate() - 0.5).abs() < 1e-12);
        let q = 0.0745;
        let mut successes = 0usize;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + trial);
            let truth: Vec<u8> = (0..4096).map(|_| rng.gen_range(0..=1u8)).collect();
            let syndrome = code.syndrome(&truth);
            let received: Vec<u8> = truth
                .iter()
                .map(|&b| if rng.gen_bool(q) { b ^ 1 } else { b })
                .collect();
            if let Ok(corrected) = reconcile(&received, &syndrome, q, code) {
                assert_eq!(code.syndrome(&corrected), syndrome);
                if corrected == truth {
                    successes += 1;
                }
            }
        }
        assert!(
            successes > 90,
            "frame success {successes}/100 at q = {q}"
        );
    });
}

#[test]
fn criterion_8_overhead_comparison() {
    criterion("8 (overhead comparison)", || {
        let spec = Table2Spec::default(); // 10 repeats, identical seeds per mode
        assert_eq!(spec.repeats, 10);
        let result = run_table2(&spec).unwrap();

        // Row structure: the eleven codeblocks (plus Total) per mode and
        // party.
        let expected = [
            "Signal Accumulation",
            "Synchronization",
            "Time Tag Filtering",
            "Sifting",
            "QBER Estimation",
            "Error Correction",
            "Privacy Amplification",
            "Obfuscation",
            "PQC Key Share",
            "Message Enc-Dec",
            "Classical Communications",
        ];
        for mode in ["hybrid", "baseline"] {
            for party in ["alice", "bob"] {
                let labels: Vec<&str> = result
                    .rows
                    .iter()
                    .filter(|r| r.mode == mode && r.party == party)
                    .map(|r| r.codeblock.as_str())
                    .collect();
                for name in expected {
                    assert!(
                        labels.contains(&name),
                        "{mode}/{party} missing row {name}"
                    );
                }
            }
        }

        for (party, ratio) in ["alice", "bob"].iter().zip(result.overhead_ratio) {
            assert!(
                (1.0..=1.25).contains(&ratio),
                "{party} overhead ratio {ratio:.4} outside [1.0, 1.25] \
                 (hybrid {:?}, baseline {:?})",
                result.hybrid_total,
                result.baseline_total
            );
        }
    });
}

#[test]
fn criterion_9_determinism() {
    criterion("9 (determinism)", || {
        // Experiment outputs are byte-identical across reruns.
        let mut fig4 = Fig4Spec::default();
        fig4.source.duration = 5.0;
        fig4.jitter_grid_ps = vec![0, 1_000];
        let a = run_fig4(&fig4).unwrap();
        let b = run_fig4(&fig4).unwrap();
        assert_eq!(
            qpc_core::experiments::fig4_table(&a),
            qpc_core::experiments::fig4_table(&b)
        );

        let mut fig5 = Fig5Spec::default();
        fig5.source.duration = 1.0;
        let a = run_fig5(&fig5).unwrap();
        let b = run_fig5(&fig5).unwrap();
        assert_eq!(
            qpc_core::experiments::fig5_table(&a),
            qpc_core::experiments::fig5_table(&b)
        );

        // Full wire transcripts over the in-process transport are
        // byte-identical for identical seeds.
        let transcripts = || {
            let mut config = SystemConfig::default();
            config.source.seed = 99;
            config.source.duration = 1.0;
            let table = MappingTable::standard_four();
            let psk = default_psk(Some(99));
            let (mut alice, mut bob) =
                session_pair(Mode::Hybrid, &config, &table, &psk).unwrap();
            bob.is_choice = Some(vec![0, 0]);
            let out = run_cycle_pair(&mut alice, &mut bob, b"again and again");
            out.alice.unwrap();
            out.bob.unwrap();
            (
                alice.transcript().wire_bytes(),
                bob.transcript().wire_bytes(),
            )
        };
        let (a1, b1) = transcripts();
        let (a2, b2) = transcripts();
        assert_eq!(a1, a2, "receiver transcript varies between runs");
        assert_eq!(b1, b2, "sender transcript varies between runs");
    });
}

// Smoke coverage for the unused-abort path referenced by the suite: a
// session constructed directly stays usable after a failed cycle.
#[test]
fn aborted_sessions_report_their_phase() {
    let mut config = SystemConfig::default();
    config.source.seed = 5;
    config.source.duration = 0.5;
    let table = MappingTable::standard_four();
    let psk = default_psk(Some(5));
    let ledger = PskLedger::read_from(&psk[..]).unwrap();
    let mut bob = Session::new(Party::Bob, Mode::Hybrid, config, table, ledger);
    bob.is_choice = Some(vec![1, 1]); // pad over lattice: demand explodes
    let mut t = qpc_core::protocol::transport::MockTransport::default();
    assert!(bob.run_cycle_bob(&mut t, b"x").is_err());
    assert_eq!(bob.phase, Phase::Aborted);
}
