"""Random protocol messages for round-trip tests."""
import numpy as np

from petuum_lite import transport as tp

U32 = 2**32 - 1
U64 = 2**64 - 1


def _u32(rng):
    return int(rng.integers(0, U32, endpoint=True))


def _u64(rng):
    return int(rng.integers(0, U64, endpoint=True, dtype=np.uint64))


def _f64(rng):
    kind = rng.integers(4)
    if kind == 0:
        return float(rng.standard_normal())
    if kind == 1:
        return float(rng.choice([0.0, -0.0, np.inf, -np.inf, 5e-324, 1.7976931348623157e308]))
    return float(np.ldexp(rng.standard_normal(), int(rng.integers(-1000, 1000))))


def _string(rng):
    alphabet = "abcXYZ_0123 βλ"
    return "".join(rng.choice(list(alphabet), int(rng.integers(0, 12))))


def random_message(rng):
    kind = int(rng.integers(11))
    n = int(rng.integers(0, 6))
    if kind == 0:
        return tp.GetReq(_string(rng), _u32(rng), _u32(rng))
    if kind == 1:
        return tp.GetResp(_string(rng), _u32(rng), tuple(_f64(rng) for _ in range(n)))
    if kind == 2:
        return tp.Inc(_string(rng), _u32(rng), _u64(rng),
                      tuple((_u32(rng), _u32(rng), _f64(rng)) for _ in range(n)))
    if kind == 3:
        return tp.Put(_string(rng), _u32(rng), _u32(rng), _f64(rng), _u32(rng))
    if kind == 4:
        return tp.ClockCommit(_u32(rng), _u64(rng))
    if kind == 5:
        return tp.Decision(_u64(rng), tuple((_u32(rng), tuple(_u32(rng) for _ in range(int(rng.integers(0, 4)))))
                                            for _ in range(n)))
    if kind == 6:
        return tp.Partial(_u64(rng), _u32(rng), tuple((_u32(rng), _f64(rng)) for _ in range(n)))
    if kind == 7:
        return tp.PullDone(_u64(rng))
    if kind == 8:
        return tp.Hello(int(rng.integers(256)), int(rng.integers(256)), _u32(rng))
    if kind == 9:
        return tp.Shutdown()
    return tp.Error(_string(rng))
