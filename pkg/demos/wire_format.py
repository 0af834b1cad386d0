"""Walk through the binary wire format byte by byte.

Encodes a tensor and a few protocol messages, hex-dumps the frames, and
decodes them back to show the round trip is bit-exact.
"""

import numpy as np

from splitfire.protocol import (
    Activations,
    Bye,
    Hello,
    RoundStart,
    decode_message,
    encode_message,
    encode_tensor,
)
from splitfire.tensor import Tensor


def hexdump(data, width=16):
    for off in range(0, len(data), width):
        chunk = data[off : off + width]
        print(f"  {off:04x}  {' '.join(f'{b:02x}' for b in chunk)}")


def main():
    print("tensor [1] = 0.5 -> rank | dims (u32 LE) | data (f32 LE):")
    hexdump(encode_tensor(Tensor(np.array([0.5], dtype=np.float32))))

    print("\nframe layout: magic 'SASL' | version | tag | payload len (u32 LE) | payload")
    for msg in (
        Bye(0),
        Hello(client_id=2, partition_size=605),
        RoundStart(round=1, quotas=(16, 8, 8)),
        Activations(1, 0, Tensor(np.ones((1, 2, 2), dtype=np.float32)),
                    Tensor(np.array([[1.0]], dtype=np.float32))),
    ):
        frame = encode_message(msg)
        print(f"\n{msg!r}  ({len(frame)} bytes)")
        hexdump(frame)
        assert decode_message(frame) == msg
    print("\nall frames decode back to equal messages")


if __name__ == "__main__":
    main()
