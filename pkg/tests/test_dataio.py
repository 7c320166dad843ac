import numpy as np
import pytest

from reftok.dataio import (DataError, SynthConfig, VideoClip, load_clip, read_rvc, read_rvc_bytes,
                           replicate_pad_reference, sample_training_clip, save_frame_dir,
                           split_reference, synth_redundant_clip, write_rvc, write_rvc_bytes)


@pytest.fixture
def frame_dir(tmp_path):
    # frame i has every pixel equal to i so the sampled indices are readable back
    frames = np.stack([np.full((8, 8, 3), i, dtype=np.uint8) for i in range(64)])
    save_frame_dir(frames, tmp_path / "clip")
    return tmp_path / "clip"


def test_load_clip_length(frame_dir):
    clip = load_clip(frame_dir, start=0, length=16, stride=1)
    assert clip.frames.shape == (16, 8, 8, 3)
    assert clip.frame_interval == 1


def test_load_clip_stride(frame_dir):
    clip = load_clip(frame_dir, start=0, length=16, stride=4)
    got = np.rint(clip.frames[:, 0, 0, 0] * 255).astype(int)
    assert list(got) == list(range(0, 61, 4))
    assert clip.frame_interval == 4


def test_load_clip_insufficient(tmp_path):
    save_frame_dir(np.zeros((32, 8, 8, 3), np.uint8), tmp_path / "c")
    with pytest.raises(DataError, match="insufficient"):
        load_clip(tmp_path / "c", start=0, length=16, stride=4)


def test_load_clip_missing(tmp_path):
    with pytest.raises(DataError):
        load_clip(tmp_path / "nope")


def test_load_clip_nonuniform(tmp_path):
    from PIL import Image
    d = tmp_path / "c"
    d.mkdir()
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(d / "000000.png")
    Image.fromarray(np.zeros((9, 8, 3), np.uint8)).save(d / "000001.png")
    with pytest.raises(DataError, match="non-uniform"):
        load_clip(d, 0, 2, 1)


def test_rvc_roundtrip(tmp_path, rng):
    arr = rng.integers(0, 256, (3, 8, 9, 3), dtype=np.uint8)
    write_rvc(tmp_path / "a.rvc", arr)
    assert np.array_equal(read_rvc(tmp_path / "a.rvc"), arr)
    raw = (tmp_path / "a.rvc").read_bytes()
    assert raw[:4] == b"RVC1"
    assert write_rvc_bytes(read_rvc_bytes(raw)) == raw
    clip = load_clip(tmp_path / "a.rvc", 1, 2, 1)
    assert np.array_equal(clip.to_uint8(), arr[1:3])


def test_rvc_truncated(rng):
    raw = write_rvc_bytes(rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        read_rvc_bytes(raw[:-1])


def _clip(t):
    return VideoClip(np.random.default_rng(t).random((t, 8, 8, 3)).astype(np.float32))


def test_split_reference_counts():
    s = split_reference(_clip(16), 1)
    assert len(s.reference_frames) == 1 and len(s.target_frames) == 15
    s = split_reference(_clip(16), 4)
    assert len(s.reference_frames) == 4 and len(s.target_frames) == 12


def test_split_reference_concat_restores():
    c = _clip(10)
    s = split_reference(c, 3)
    assert np.array_equal(np.concatenate([s.reference_frames.frames, s.target_frames.frames]), c.frames)


@pytest.mark.parametrize("n", [0, 2, 5])
def test_split_reference_range(n):
    with pytest.raises(DataError):
        split_reference(_clip(2) if n == 2 else _clip(5), n)


def test_replicate_pad_single_frame():
    ref = _clip(1)
    out = replicate_pad_reference(ref, 4)
    assert len(out) == 4
    assert all(np.array_equal(out.frames[i], ref.frames[0]) for i in range(4))


def test_replicate_pad_noop_and_idempotent():
    ref = _clip(4)
    assert replicate_pad_reference(ref, 4) is ref
    once = replicate_pad_reference(_clip(3), 4)
    assert np.array_equal(replicate_pad_reference(once, 4).frames, once.frames)


def test_replicate_pad_last_frame():
    a = np.zeros((8, 8, 3), np.float32)
    b = np.ones((8, 8, 3), np.float32)
    out = replicate_pad_reference(VideoClip(np.stack([a, b])), 4)
    assert [float(f.mean()) for f in out.frames] == [0.0, 1.0, 1.0, 1.0]


def test_synth_deterministic():
    assert np.array_equal(synth_redundant_clip(3).frames, synth_redundant_clip(3).frames)
    assert not np.array_equal(synth_redundant_clip(3).frames, synth_redundant_clip(4).frames)


def test_synth_zero_motion_static():
    c = synth_redundant_clip(9, SynthConfig(motion=0.0))
    assert np.all(c.frames == c.frames[:1])


def test_synth_default_statistics():
    # overlap is a property of the scene, so it is measured on the unblurred render
    # measured over many seeds: mean per-frame L1 to frame 0 and pixel overlap
    cfg = SynthConfig()
    sharp = SynthConfig(blur=0.0)
    for seed in range(200):
        f = synth_redundant_clip(seed, cfg).frames
        assert 0.0 < np.abs(f[1:] - f[:1]).mean() < 0.2
        assert f.min() >= 0.0 and f.max() <= 1.0
        g = synth_redundant_clip(seed, sharp).frames
        overlap = (np.abs(g - g[:1]).max(-1) < 1 / 255).mean(axis=(1, 2))
        assert overlap.min() >= 0.6


def test_synth_blur_keeps_layout():
    a = synth_redundant_clip(5, SynthConfig(blur=0.0)).frames
    b = synth_redundant_clip(5, SynthConfig(blur=1.0)).frames
    # blurring draws no random numbers: the mean colour barely moves
    assert abs(a.mean() - b.mean()) < 0.01
    assert np.abs(np.diff(b, axis=2)).mean() < np.abs(np.diff(a, axis=2)).mean()


def test_synth_degenerate():
    with pytest.raises(DataError):
        synth_redundant_clip(0, SynthConfig(height=8, width=8, glyph_min=6, glyph_max=12))


class _StubSource:
    n_videos = 5

    def __init__(self, n_frames=64):
        self.n_frames = n_frames

    def frame_count(self, i):
        return self.n_frames

    def clip(self, i, start, length, stride):
        return VideoClip(np.zeros((length, 8, 8, 3), np.float32), frame_interval=stride)


def test_sample_degenerate_interval():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_training_clip(_StubSource(), 8, (1, 1), rng).frame_interval == 1


def test_sample_interval_uniform():
    rng = np.random.default_rng(1)
    n = 10_000
    counts = np.zeros(5, int)
    for _ in range(n):
        counts[sample_training_clip(_StubSource(), 8, (1, 4), rng).frame_interval] += 1
    p = 0.25
    sigma = np.sqrt(n * p * (1 - p))
    assert counts[0] == 0
    assert np.all(np.abs(counts[1:] - n * p) < 3 * sigma)


def test_sample_source_too_short():
    with pytest.raises(DataError):
        sample_training_clip(_StubSource(24), 8, (4, 4), np.random.default_rng(0))
