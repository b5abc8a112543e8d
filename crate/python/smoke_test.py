"""Smoke test for the voxclone_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/voxclone_py-*.whl
then run: python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import voxclone_py as vc

TINY = """
seed = 3
out_dir = "out"

[corpus]
path = "corpus"

[adapt]
corpus = "target"
acoustic_steps = 3
vocoder_steps = 1

[train]
duration_steps = 5
acoustic_steps = 5
vocoder_steps = 1

[duration]
embedding_dim = 8
recurrent_hidden = 8

[acoustic]
speaker_embedding_dim = 4
encoder_dim = 8
prenet_dims = [8, 8]
decoder_dim = 16
postnet_layers = 2
postnet_dim = 8
batch_size = 2

[vocoder]
initial_channels = 16
resblock_kernels = [3]
resblock_dilations = [[1]]
periods = [2]
scales = 1
discriminator_channels = [2, 4]
segment_frames = 4
"""


def main():
    lex = vc.Lexicon.parse("mano\tm a n o\nse\ts e\n,\tSP\n")
    phones = lex.text_to_phones("mano, se")
    assert phones == ["SIL", "m", "a", "n", "o", "SP", "s", "e", "SIL"], phones
    try:
        lex.text_to_phones("xylo")
    except vc.VoxcloneError as e:
        assert str(e).startswith("frontend:"), e
    else:
        raise AssertionError("unknown grapheme accepted")

    sr = vc.SAMPLE_RATE
    sine = [0.5 * math.sin(2 * math.pi * 440 * i / sr) for i in range(sr // 2)]
    mel = vc.compute_mel(sine)
    assert len(mel) == 1 + len(sine) // vc.HOP and len(mel[0]) == 80

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        vc.write_toy_corpus(str(root / "corpus"), [("a", 110.0, 2), ("b", 190.0, 2)], 1)
        vc.write_toy_corpus(str(root / "target"), [("t", 150.0, 2)], 2)
        (root / "config.toml").write_text(TINY)
        cfg = vc.PipelineConfig.load(str(root / "config.toml"), [("synth.texts", '["mano, se"]')])
        assert len(cfg.hash("train")) == 64

        summary = vc.prepare(cfg)
        assert summary["kept"] == 4, summary
        for stage in ["train", "adapt", "synth"]:
            record = vc.run_stage(cfg, stage)
            assert record["stage"] == stage and not record["errors"], record
        assert record["details"]["utterances"][0]["samples"] % vc.HOP == 0

        info = vc.inspect_checkpoint(str(root / "out" / "stage2" / "acoustic.ckpt"))
        assert info["type"] == "acoustic" and info["speakers"] == ["a", "b", "t"], info

        synth = vc.Synthesizer.load(str(root / "out" / "stage2"))
        samples, meta = synth.synthesize("se", "t", 0)
        assert len(samples) == meta["frames"] * vc.HOP

        bad = root / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        try:
            vc.inspect_checkpoint(str(bad))
        except vc.VoxcloneError as e:
            assert str(e).startswith("checkpoint:"), e
        else:
            raise AssertionError("corrupt checkpoint accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
