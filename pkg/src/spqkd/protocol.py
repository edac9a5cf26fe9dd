"""BB84 session for both stations.

Bob drives the classical exchange and Alice answers; every request gets exactly
one reply::

    HELLO           -> HELLO            version, slots, public seed
    BASIS_ANNOUNCE  -> SIFT_MASK        Bob's accepted slots and bases
    SAMPLE_REQUEST  -> SAMPLE_REVEAL    QBER sample (or the whole key)
    PARITY_QUERY    -> PARITY_REPLY     CASCADE, repeated
    KEY_DIGEST      -> KEY_DIGEST       reconciled keys agree?
    PA_SEED         -> KEY_DIGEST       Toeplitz seed; digest of the final key

Either side may send ABORT instead of a reply.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from . import experiment as ref
from .distill import (
    DIGEST_BYTES,
    MAX_EXTRA_PASSES,
    MAX_QBER,
    Cascade,
    LeakageLedger,
    PaMode,
    ParityResponder,
    ReconciliationError,
    final_key_length,
    finish,
    key_digest,
    toeplitz_hash,
)
from .optics import LinkRecords
from .rng import substream
from .security import OperatingPoint
from .transport import (
    Endpoint,
    MessageType,
    ProtocolError,
    SessionAborted,
    Transcript,
    loopback_pair,
    socket_pair,
)

PROTOCOL_VERSION = 1
QBER_FLOOR = 0.01


class Role(str, enum.Enum):
    ALICE = "alice"
    BOB = "bob"


class Phase(enum.IntEnum):
    QUANTUM = 0
    SIFTING = 1
    SAMPLING = 2
    RECONCILING = 3
    AMPLIFYING = 4
    DONE = 5
    ABORTED = 6


class QberMode(str, enum.Enum):
    FULL_COMPARE = "full"  # characterisation: reveals and discards the key
    SAMPLED = "sampled"
    RECONCILED = "reconciled"  # no sample; QBER counted from the bits CASCADE corrects


@dataclass
class SiftedKey:
    bits: np.ndarray
    slot_indices: np.ndarray

    @property
    def length(self) -> int:
        return int(self.bits.size)

    def without(self, positions: np.ndarray) -> "SiftedKey":
        keep = np.ones(self.length, dtype=bool)
        keep[positions] = False
        return SiftedKey(self.bits[keep], self.slot_indices[keep])


@dataclass
class QberEstimate:
    value: float
    low: float
    high: float
    errors: int
    sample_size: int


def wilson_interval(errors: int, n: int, z: float = 1.96) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = errors / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class SessionOptions:
    qber_mode: QberMode = QberMode.SAMPLED
    sample_fraction: float = 0.1
    qber_prior: float = ref.MEASURED_QBER  # CASCADE block size when no sample is taken
    pa_mode: PaMode = PaMode.FORMULA
    f_e: float = ref.F_SHANNON
    s_m: float = ref.SUPPRESSION_C * ref.MU**2 / 2
    pulse_rate_hz: float = ref.PULSE_RATE_HZ

    def __post_init__(self):
        self.qber_mode = QberMode(self.qber_mode)
        self.pa_mode = PaMode(self.pa_mode)
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not 0 < self.qber_prior < MAX_QBER:
            raise ValueError(f"qber_prior must lie in (0, {MAX_QBER})")


@dataclass
class SessionState:
    role: Role
    phase: Phase = Phase.QUANTUM
    slot_log: dict[str, np.ndarray] = field(default_factory=dict)
    n_slots: int = 0
    sifted: SiftedKey | None = None
    qber_estimate: QberEstimate | None = None
    ledger: LeakageLedger = field(default_factory=LeakageLedger)
    reconciled: np.ndarray | None = None
    final_key: object = None  # DistilledKey
    abort_reason: str = ""

    def advance(self, phase: Phase) -> None:
        if phase is not Phase.ABORTED and phase < self.phase:
            raise ProtocolError(f"{self.role.value}: cannot go back from {self.phase.name} to {phase.name}")
        if self.phase is Phase.ABORTED:
            raise ProtocolError(f"{self.role.value}: session already aborted")
        self.phase = phase

    def fail(self, reason: str) -> None:
        self.phase = Phase.ABORTED
        self.abort_reason = reason


def run_quantum_phase(session: SessionState, records: LinkRecords) -> SessionState:
    """Fill the slot log: Alice keeps every slot, Bob only slots with one accepted gated click."""
    if session.phase is not Phase.QUANTUM:
        raise ProtocolError("quantum phase already finished")
    session.n_slots = len(records)
    if session.role is Role.ALICE:
        session.slot_log = {"slot": records.slot_index, "basis": records.alice_basis, "bit": records.alice_bit}
    else:
        acc = records.accepted_slots()
        ch = records.accepted[acc].astype(np.int64)
        session.slot_log = {"slot": records.slot_index[acc], "index": acc,
                            "basis": (ch >> 1).astype(np.uint8), "bit": (ch & 1).astype(np.uint8)}
    return session


# -- payload codecs -----------------------------------------------------------

def pack_bits(bits: np.ndarray) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack("<I", bits.size) + np.packbits(bits).tobytes()


def unpack_bits(payload: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<I", payload, offset)
    nbytes = (n + 7) // 8
    start = offset + 4
    if len(payload) < start + nbytes:
        raise ProtocolError("bit field truncated")
    raw = np.frombuffer(payload, dtype=np.uint8, count=nbytes, offset=start)
    return np.unpackbits(raw)[:n], start + nbytes


def pack_u32s(values: np.ndarray) -> bytes:
    values = np.asarray(values, dtype="<u4")
    return struct.pack("<I", values.size) + values.tobytes()


def unpack_u32s(payload: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<I", payload, offset)
    start = offset + 4
    if len(payload) < start + 4 * n:
        raise ProtocolError("index list truncated")
    return np.frombuffer(payload, dtype="<u4", count=n, offset=start).astype(np.int64), start + 4 * n


HELLO = struct.Struct("<BIQ")
PARITY_QUERY = struct.Struct("<BIII")


class RemoteParityChannel:
    """Bob's view of Alice's parities over the classical channel."""

    def __init__(self, endpoint: Endpoint):
        self.endpoint = endpoint

    def parity(self, pass_index: int, block_index: int, start: int, end: int) -> int:
        self.endpoint.send(MessageType.PARITY_QUERY, PARITY_QUERY.pack(pass_index, block_index, start, end))
        reply = self.endpoint.expect(MessageType.PARITY_REPLY)
        if len(reply.payload) != 1 or reply.payload[0] > 1:
            raise ProtocolError("malformed parity reply")
        return reply.payload[0]


# -- Alice --------------------------------------------------------------------

def serve_alice(endpoint: Endpoint, state: SessionState) -> SessionState:
    """Answer Bob's requests until the session ends."""
    responder = None
    seed = None
    try:
        while state.phase not in (Phase.DONE, Phase.ABORTED):
            msg = endpoint.recv()
            t = msg.msg_type
            if t is MessageType.HELLO:
                version, n_slots, seed = HELLO.unpack(msg.payload)
                if version != PROTOCOL_VERSION or n_slots != state.n_slots:
                    endpoint.abort("hello mismatch")
                    state.fail("hello mismatch")
                    break
                endpoint.send(MessageType.HELLO, HELLO.pack(PROTOCOL_VERSION, state.n_slots, seed))
            elif t is MessageType.BASIS_ANNOUNCE:
                state.advance(Phase.SIFTING)
                slots, off = unpack_u32s(msg.payload)
                bases, _ = unpack_bits(msg.payload, off)
                if bases.size != slots.size or np.any(slots >= state.n_slots):
                    endpoint.abort("basis announcement malformed")
                    state.fail("basis announcement malformed")
                    break
                mask = state.slot_log["basis"][slots] == bases
                state.sifted = SiftedKey(state.slot_log["bit"][slots][mask], state.slot_log["slot"][slots][mask])
                endpoint.send(MessageType.SIFT_MASK, pack_bits(mask.astype(np.uint8)))
            elif t is MessageType.SAMPLE_REQUEST:
                state.advance(Phase.SAMPLING)
                positions, _ = unpack_u32s(msg.payload)
                if np.any(positions >= state.sifted.length):
                    endpoint.abort("sample position out of range")
                    state.fail("sample position out of range")
                    break
                endpoint.send(MessageType.SAMPLE_REVEAL, pack_bits(state.sifted.bits[positions]))
                state.ledger.disclose_samples(positions.size)
                state.sifted = state.sifted.without(positions)
            elif t is MessageType.PARITY_QUERY:
                state.advance(Phase.RECONCILING)
                if responder is None:
                    responder = ParityResponder(state.sifted.bits, seed)
                p, b, s, e = PARITY_QUERY.unpack(msg.payload)
                try:
                    parity = responder.parity(p, b, s, e)
                except ValueError as exc:
                    endpoint.abort(str(exc))
                    state.fail(str(exc))
                    break
                state.ledger.disclose_parity()
                endpoint.send(MessageType.PARITY_REPLY, bytes([parity]))
            elif t is MessageType.KEY_DIGEST:
                state.advance(Phase.RECONCILING)
                state.reconciled = state.sifted.bits
                state.ledger.disclose_digest(8 * DIGEST_BYTES)
                endpoint.send(MessageType.KEY_DIGEST, key_digest(state.reconciled))
            elif t is MessageType.PA_SEED:
                state.advance(Phase.AMPLIFYING)
                key = state.reconciled if state.reconciled is not None else state.sifted.bits
                seed_bits, _ = unpack_bits(msg.payload)
                m = seed_bits.size - key.size + 1 if seed_bits.size else 0
                state.final_key = finish(toeplitz_hash(key, seed_bits, m))
                endpoint.send(MessageType.KEY_DIGEST, bytes.fromhex(state.final_key.digest))
                state.advance(Phase.DONE)
            else:
                endpoint.abort(f"unexpected {t.name}")
                state.fail(f"unexpected {t.name}")
    except SessionAborted as exc:
        state.fail(exc.reason)
    except (ProtocolError, struct.error) as exc:
        endpoint.abort(str(exc))
        state.fail(str(exc))
    return state


# -- Bob ----------------------------------------------------------------------

@dataclass
class BobOutcome:
    sifted: int = 0
    qber_measured: float = math.nan
    errors_corrected: int = 0
    extra_passes: int = 0
    p_exp: float = 0.0
    operating_point: OperatingPoint | None = None
    final_bits: int = 0


def run_bob(endpoint: Endpoint, state: SessionState, options: SessionOptions, seed: int) -> BobOutcome:
    """Drive the exchange from Bob's side."""
    out = BobOutcome()
    public_seed = int(substream(seed, "protocol.public").integers(0, 2**63))
    sample_rng = substream(seed, "protocol.sample")
    pa_rng = substream(seed, "distill.pa")
    try:
        endpoint.send(MessageType.HELLO, HELLO.pack(PROTOCOL_VERSION, state.n_slots, public_seed))
        endpoint.expect(MessageType.HELLO)

        # sifting
        state.advance(Phase.SIFTING)
        log = state.slot_log
        # positions are offsets within the batch, so they fit in 32 bits
        endpoint.send(MessageType.BASIS_ANNOUNCE, pack_u32s(log["index"]) + pack_bits(log["basis"]))
        mask, _ = unpack_bits(endpoint.expect(MessageType.SIFT_MASK).payload)
        if mask.size != log["slot"].size:
            endpoint.abort("sift mask length mismatch")
            state.fail("sift mask length mismatch")
            return out
        keep = mask.astype(bool)
        state.sifted = SiftedKey(log["bit"][keep], log["slot"][keep])
        out.sifted = state.sifted.length
        out.p_exp = log["slot"].size / state.n_slots if state.n_slots else 0.0

        # QBER
        state.advance(Phase.SAMPLING)
        sample_errors, sample_size = 0, 0
        if options.qber_mode is not QberMode.RECONCILED and state.sifted.length:
            est = estimate_qber(endpoint, state, options, sample_rng)
            sample_errors, sample_size = est.errors, est.sample_size
        if options.qber_mode is QberMode.FULL_COMPARE:
            out.qber_measured = state.qber_estimate.value
            state.sifted = SiftedKey(state.sifted.bits[:0], state.sifted.slot_indices[:0])

        # reconciliation
        state.advance(Phase.RECONCILING)
        key = state.sifted.bits
        if key.size:
            if options.qber_mode is QberMode.SAMPLED:
                est = state.qber_estimate
                if est.low >= MAX_QBER:
                    raise ReconciliationError(f"QBER {est.value:.3f} too high for a positive key")
                block_qber = min(max(est.value, QBER_FLOOR), MAX_QBER - 0.01)
            else:
                block_qber = options.qber_prior
            cascade = Cascade(key, block_qber, RemoteParityChannel(endpoint), public_seed, state.ledger).run()
            extra = 0
            while True:
                mine = key_digest(cascade.bob)
                state.ledger.disclose_digest(8 * DIGEST_BYTES)
                endpoint.send(MessageType.KEY_DIGEST, mine)
                if endpoint.expect(MessageType.KEY_DIGEST).payload == mine:
                    break
                if extra == MAX_EXTRA_PASSES:
                    endpoint.abort("reconciled keys differ")
                    state.fail("reconciled keys differ")
                    return out
                cascade.extra_pass()
                extra += 1
            out.errors_corrected = int(np.count_nonzero(cascade.bob != key))
            out.extra_passes = extra
            state.reconciled = cascade.bob.copy()
        else:
            state.reconciled = key

        if options.qber_mode is not QberMode.FULL_COMPARE:
            total = sample_size + key.size
            out.qber_measured = (sample_errors + out.errors_corrected) / total if total else math.nan

        # privacy amplification
        state.advance(Phase.AMPLIFYING)
        n = state.reconciled.size
        m = 0
        if n and out.p_exp > 0:
            e = min(0.5, out.qber_measured)
            op = OperatingPoint(out.p_exp, options.s_m, e, options.f_e, options.pulse_rate_hz)
            out.operating_point = op
            state.ledger.multiphoton_fraction = op.s_m / op.p_exp
            state.ledger.f_e_used = op.f_e
            m = final_key_length(n, op, state.ledger, options.pa_mode)
        seed_bits = pa_rng.integers(0, 2, size=n + m - 1, dtype=np.uint8) if m else np.zeros(0, dtype=np.uint8)
        endpoint.send(MessageType.PA_SEED, pack_bits(seed_bits))
        state.final_key = finish(toeplitz_hash(state.reconciled, seed_bits, m), secure=m > 0)
        theirs = endpoint.expect(MessageType.KEY_DIGEST).payload
        if theirs.hex() != state.final_key.digest:
            state.fail("final key digests differ")
            return out
        out.final_bits = state.final_key.length
        state.advance(Phase.DONE)
    except ReconciliationError as exc:
        endpoint.abort(str(exc))
        state.fail(str(exc))
    except SessionAborted as exc:
        state.fail(exc.reason)
    except (ProtocolError, struct.error) as exc:
        endpoint.abort(str(exc))
        state.fail(str(exc))
    return out


def estimate_qber(endpoint: Endpoint, state: SessionState, options: SessionOptions,
                  rng: np.random.Generator) -> QberEstimate:
    """Reveal a random sample (or everything, in full-compare mode) and drop it from the key."""
    n = state.sifted.length
    if options.qber_mode is QberMode.FULL_COMPARE:
        positions = np.arange(n)
    else:
        k = max(1, round(options.sample_fraction * n))
        if k > n:
            raise ValueError("sample larger than key")
        positions = np.sort(rng.choice(n, size=k, replace=False))
    endpoint.send(MessageType.SAMPLE_REQUEST, pack_u32s(positions))
    theirs, _ = unpack_bits(endpoint.expect(MessageType.SAMPLE_REVEAL).payload)
    if theirs.size != positions.size:
        raise ProtocolError("sample reveal length mismatch")
    errors = int(np.count_nonzero(theirs != state.sifted.bits[positions]))
    low, high = wilson_interval(errors, positions.size)
    state.qber_estimate = QberEstimate(errors / positions.size, low, high, errors, int(positions.size))
    state.ledger.disclose_samples(positions.size)
    state.sifted = state.sifted.without(positions)
    return state.qber_estimate


def compare_keys(a: np.ndarray, b: np.ndarray) -> QberEstimate:
    """Offline full comparison of two equal-length keys."""
    if a.size != b.size:
        raise ValueError("keys differ in length")
    errors = int(np.count_nonzero(a != b))
    low, high = wilson_interval(errors, a.size)
    return QberEstimate(errors / a.size if a.size else 0.0, low, high, errors, int(a.size))


# -- whole session ------------------------------------------------------------

@dataclass
class SessionResult:
    alice: SessionState
    bob: SessionState
    outcome: BobOutcome
    transcript: Transcript
    options: SessionOptions

    @property
    def ok(self) -> bool:
        return self.alice.phase is Phase.DONE and self.bob.phase is Phase.DONE

    def summary(self) -> dict:
        bob, out = self.bob, self.outcome
        slots = bob.n_slots
        duration = slots / self.options.pulse_rate_hz if slots else 0.0
        sifted = out.sifted
        return {
            "slots": slots,
            "accepted": int(bob.slot_log["slot"].size) if bob.slot_log else 0,
            "sifted": sifted,
            "qber": out.qber_measured,
            "qber_sample": None if bob.qber_estimate is None else bob.qber_estimate.value,
            "leakage": bob.ledger.total,
            "parity_bits": bob.ledger.parity_bits_disclosed,
            "final_bits": out.final_bits,
            "G_empirical": out.final_bits / slots if slots else 0.0,
            "sifted_rate_hz": sifted / duration if duration else 0.0,
            "secret_rate_hz": out.final_bits / duration if duration else 0.0,
            "phase": bob.phase.name,
            "abort_reason": bob.abort_reason or self.alice.abort_reason,
        }

    def summary_text(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=False, default=float) + "\n"


def run_session(records: LinkRecords, seed: int, options: SessionOptions | None = None,
                transport: str = "loopback") -> SessionResult:
    """Run Alice (in a thread) and Bob over a fresh byte stream for one batch of slots."""
    options = options or SessionOptions()
    alice = run_quantum_phase(SessionState(Role.ALICE), records)
    bob = run_quantum_phase(SessionState(Role.BOB), records)
    if transport == "loopback":
        a_stream, b_stream = loopback_pair()
    elif transport == "socket":
        a_stream, b_stream = socket_pair()
    else:
        raise ValueError(f"unknown transport {transport!r}")
    session_id = seed & (2**64 - 1)
    transcript = Transcript()
    a_end = Endpoint(a_stream, session_id)
    b_end = Endpoint(b_stream, session_id, transcript)
    failure: list[BaseException] = []

    def alice_main():
        try:
            serve_alice(a_end, alice)
        except BaseException as exc:  # surfaced in the caller's thread
            failure.append(exc)
            alice.fail(repr(exc))
            a_stream.close()

    worker = threading.Thread(target=alice_main, name=f"alice-{session_id}", daemon=True)
    worker.start()
    try:
        outcome = run_bob(b_end, bob, options, seed)
    finally:
        worker.join(timeout=60)
        a_stream.close()
        b_stream.close()
    if failure:
        raise failure[0]
    return SessionResult(alice, bob, outcome, transcript, options)
