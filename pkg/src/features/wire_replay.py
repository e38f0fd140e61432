"""
Binary record of the FedGC message stream.

Frame layout, little-endian:
    [u8 tag][u32 m][u32 len][f64 x len]
tag 1 is an up-message (payload h_c then h_a, len = 2 p_m), tag 2 a
down-message (payload g, len = p_m). A round is M up frames followed by
M down frames.
"""
import logging
from typing import Dict, List, Tuple, Union

import numpy as np

from src.coordinator import DownMessage, RoundRecord, ServerModel, UpMessage, server_gradient, server_update
from src.errors import ProtocolError
from src.features.artifact_store import atomic_write_bytes

logger = logging.getLogger("WireReplay")

Pair = Tuple[int, int]
Message = Union[UpMessage, DownMessage]

TAG_UP = 1
TAG_DOWN = 2
HEADER = np.dtype([("tag", "<u1"), ("m", "<u4"), ("len", "<u4")])
PAYLOAD = np.dtype("<f8")


def _frame(tag: int, m: int, payload: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(payload, dtype=PAYLOAD)
    header = np.array([(tag, m, payload.size)], dtype=HEADER)
    return header.tobytes() + payload.tobytes()


def encode(message: Message) -> bytes:
    if isinstance(message, UpMessage):
        return _frame(TAG_UP, message.m, np.concatenate([message.h_c, message.h_a]))
    if isinstance(message, DownMessage):
        return _frame(TAG_DOWN, message.m, message.g)
    raise ProtocolError(f"Cannot encode {type(message).__name__}")


def decode(data: bytes) -> List[Message]:
    messages: List[Message] = []
    offset = 0
    while offset < len(data):
        if len(data) - offset < HEADER.itemsize:
            raise ProtocolError(f"Truncated frame header at byte {offset}", {"offset": offset})
        header = np.frombuffer(data, dtype=HEADER, count=1, offset=offset)[0]
        tag, m, n = int(header["tag"]), int(header["m"]), int(header["len"])
        offset += HEADER.itemsize
        end = offset + n * PAYLOAD.itemsize
        if end > len(data):
            raise ProtocolError(f"Truncated payload for client {m} at byte {offset}", {"offset": offset, "client": m})
        payload = np.frombuffer(data, dtype=PAYLOAD, count=n, offset=offset).astype(float)
        offset = end
        if tag == TAG_UP:
            if n % 2:
                raise ProtocolError(f"Up frame for client {m} has odd length {n}", {"client": m})
            messages.append(UpMessage(m=m, h_c=payload[: n // 2], h_a=payload[n // 2:]))
        elif tag == TAG_DOWN:
            messages.append(DownMessage(m=m, g=payload))
        else:
            raise ProtocolError(f"Unknown frame tag {tag}", {"tag": tag, "offset": offset})
    return messages


class WireRecorder:
    """Round hook that serialises the transmitted (post-DP) messages."""

    def __init__(self):
        self.frames: List[bytes] = []
        self.rounds = 0

    def __call__(self, record: RoundRecord):
        self.frames.extend(encode(u) for u in record.ups)
        self.frames.extend(encode(DownMessage(m=m, g=g)) for m, g in enumerate(record.g_sent))
        self.rounds += 1

    def to_bytes(self) -> bytes:
        return b"".join(self.frames)

    def save(self, path: str):
        atomic_write_bytes(path, self.to_bytes())
        logger.info(f"Recorded {self.rounds} round(s) to {path}")


def split_rounds(messages: List[Message], M: int) -> List[Tuple[List[UpMessage], List[DownMessage]]]:
    if len(messages) % (2 * M):
        raise ProtocolError(f"{len(messages)} frames do not form whole rounds of {2 * M}", {"frames": len(messages)})
    rounds = []
    for start in range(0, len(messages), 2 * M):
        ups, downs = messages[start:start + M], messages[start + M:start + 2 * M]
        if not all(isinstance(u, UpMessage) for u in ups) or not all(isinstance(d, DownMessage) for d in downs):
            raise ProtocolError(f"Round {start // (2 * M) + 1} is not {M} up frames then {M} down frames")
        rounds.append((ups, downs))
    return rounds


def replay(
    server: ServerModel,
    data: bytes,
    exact: bool = True,
    verify_downlink: bool = False,
) -> List[Dict[Pair, np.ndarray]]:
    """
    Feeds recorded up-messages into `server` round by round and returns the
    post-update Ahat after each round. verify_downlink re-derives every g and
    compares it bit-for-bit with the recorded frame (valid without downlink DP).
    """
    trajectory = []
    for t, (ups, downs) in enumerate(split_rounds(decode(data), server.idx.M), start=1):
        if verify_downlink:
            for d in downs:
                expected = server_gradient(server, ups, d.m).g
                if not np.array_equal(expected, d.g):
                    raise ProtocolError(f"Down-message for client {d.m} does not match the replay at round {t}", {"round": t})
        server = server_update(server, ups, exact=exact)
        trajectory.append({k: v.copy() for k, v in server.A_hat.items()})
    return trajectory


def replay_file(server: ServerModel, path: str, **kwargs) -> List[Dict[Pair, np.ndarray]]:
    with open(path, "rb") as f:
        return replay(server, f.read(), **kwargs)
