use nalgebra::{Quaternion, Vector3};
use proptest::prelude::*;
use teleoplab::device::Phase;
use teleoplab::geometry::Pose;
use teleoplab::protocol::*;
use teleoplab::task::TaskStep;

fn pose() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-5.0f64..5.0), prop::array::uniform4(-1.0f64..1.0))
        .prop_filter("degenerate", |(_, q)| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|(p, q)| Pose::new(Vector3::from(p), Quaternion::new(q[0], q[1], q[2], q[3])))
}

fn joints() -> impl Strategy<Value = [f64; 6]> {
    prop::array::uniform6(-1e3f64..1e3)
}

fn token() -> impl Strategy<Value = Token> {
    any::<[u8; 16]>().prop_map(Token)
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u32>(), any::<u64>(), pose(), any::<bool>(), 0u8..3, 0u8..8).prop_map(
            |(seq, send_time, pose, clutch, g, b)| Message::Waypoint(WaypointMsg {
                seq,
                send_time,
                pose,
                clutch,
                gripper: [Gripper::Open, Gripper::Close, Gripper::Hold][g as usize],
                buttons: Buttons(b),
            })
        ),
        (any::<u32>(), any::<u64>(), joints()).prop_map(|(seq, send_time, q_target)| {
            Message::MotionCmd(MotionCmd { seq, send_time, q_target })
        }),
        (any::<u32>(), joints(), any::<u64>()).prop_map(|(seq_echo, q_actual, arm_time)| {
            Message::Feedback(FeedbackMsg { seq_echo, q_actual, arm_time })
        }),
        (any::<u16>(), "[a-zA-Z0-9 _-]{0,64}").prop_map(|(protocol_version, operator_id)| {
            Message::Hello(SessionHello { protocol_version, operator_id })
        }),
        (any::<u16>(), token()).prop_map(|(protocol_version, token)| {
            Message::Resume(SessionResume { protocol_version, token })
        }),
        (token(), any::<u16>(), 0u8..5).prop_map(|(token, v, k)| {
            Message::SessionReply(match k {
                0 => SessionReply::Accept { token, protocol_version: v },
                1 => SessionReply::Busy,
                2 => SessionReply::Expired,
                3 => SessionReply::InvalidToken,
                _ => SessionReply::IncompatibleVersion { protocol_version: v },
            })
        }),
        Just(Message::Bye),
        (
            any::<u64>(),
            any::<u32>(),
            joints(),
            pose(),
            any::<[bool; 6]>(),
            0u8..5,
            0u8..4,
            prop::option::of(0.0f64..1e4),
            any::<(u32, u32)>()
        )
            .prop_map(|(server_time, ack_seq, q, tcp, f, step, phase, last_yield, (cycles, degraded_events))| {
                Message::State(StateMsg {
                    server_time,
                    ack_seq,
                    q,
                    tcp,
                    clutch_engaged: f[0],
                    clamped: f[1],
                    lock_orientation: f[2],
                    degraded: f[3],
                    estop: f[4],
                    settled: f[5],
                    task_step: TaskStep::from_code(step).unwrap(),
                    tester_phase: Phase::from_code(phase).unwrap(),
                    last_yield,
                    cycles,
                    degraded_events,
                })
            }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5000))]

    #[test]
    fn binary_round_trip(m in message()) {
        let bytes = encode(&m);
        prop_assert!(bytes.len() <= MAX_FRAME);
        prop_assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn json_round_trip(m in message()) {
        prop_assert_eq!(Message::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn payload_bit_flip_is_crc_error(m in message(), bit in any::<prop::sample::Index>()) {
        let mut bytes = encode(&m);
        let body = bytes.len() - HEADER_LEN;
        let i = bit.index(body * 8);
        bytes[HEADER_LEN + i / 8] ^= 1 << (i % 8);
        let crc_error = matches!(decode(&bytes), Err(DecodeError::BadCrc { .. }));
        prop_assert!(crc_error);
    }

    /// The type byte is outside the checksum, so only magic and length
    /// flips are guaranteed to be caught in the header.
    #[test]
    fn magic_or_length_bit_flip_is_error(m in message(), bit in 0usize..32) {
        let mut bytes = encode(&m);
        let i = if bit < 16 { bit } else { 24 + (bit - 16) };
        bytes[i / 8] ^= 1 << (i % 8);
        prop_assert!(decode(&bytes).is_err());
    }

    #[test]
    fn decoder_is_total(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let _ = decode(&bytes);
        let mut fb = FrameBuffer::default();
        fb.push(&bytes);
        while let Ok(Some(_)) = fb.next_message() {}
    }

    #[test]
    fn valid_header_random_payload_is_typed(ty in 1u8..=8, payload in prop::collection::vec(any::<u8>(), 0..200)) {
        let mut bytes = vec![0x1E, 0x7E, ty];
        bytes.extend_from_slice(&(payload.len() as u16).to_le_bytes());
        bytes.extend_from_slice(&payload);
        bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        match decode(&bytes) {
            Ok(m) => prop_assert_eq!(encode(&m), bytes),
            Err(DecodeError::LengthMismatch { .. } | DecodeError::InvalidField(_)) => {}
            Err(e) => prop_assert!(false, "unexpected {e:?}"),
        }
    }
}
