import numpy as np
import pytest

from flowvc.corpus import (
    SynthSpeaker,
    make_corpus,
    make_scripts,
    make_speakers,
    render_utterance,
)


def dominant_hz(samples, rate=16000):
    spec = np.abs(np.fft.rfft(samples * np.hanning(samples.size)))
    return np.argmax(spec) * rate / samples.size


class TestSpeakers:
    def test_fields_within_ranges(self):
        for spk in make_speakers(8, seed=0):
            assert 80.0 <= spk.f0_base <= 300.0
            assert 0.8 <= spk.formant_shift <= 1.25
            assert spk.spectral_tilt < 0

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthSpeaker(f0_base=50.0, formant_shift=1.0, spectral_tilt=-10.0, seed=0)
        with pytest.raises(ValueError):
            SynthSpeaker(f0_base=120.0, formant_shift=2.0, spectral_tilt=-10.0, seed=0)

    def test_deterministic(self):
        a = make_speakers(4, seed=9)
        b = make_speakers(4, seed=9)
        assert [s.f0_base for s in a] == [s.f0_base for s in b]


class TestScripts:
    def test_segment_counts_and_durations(self):
        for script in make_scripts(20, seed=1):
            assert 3 <= len(script.segments) <= 6
            total = sum(d for _, d in script.segments)
            assert 0.8 <= total <= 1.6


class TestRendering:
    def test_deterministic(self):
        speakers = make_speakers(2, seed=2)
        scripts = make_scripts(1, seed=2)
        a = render_utterance(scripts[0], speakers[0])
        b = render_utterance(scripts[0], speakers[0])
        assert np.array_equal(a.samples, b.samples)

    def test_same_script_two_speakers_different_f0(self):
        # DFT-peak oracle: the dominant bin tracks each speaker's pitch
        speakers = make_speakers(2, seed=3)  # endpoints of the f0 range
        scripts = make_scripts(2, seed=3)
        for script in scripts:
            peaks = []
            for spk in speakers:
                clip = render_utterance(script, spk)
                peak = dominant_hz(clip.samples)
                assert abs(peak - spk.f0_base) <= 0.15 * spk.f0_base
                peaks.append(peak)
            assert abs(peaks[0] - peaks[1]) > 20.0

    def test_samples_bounded(self):
        speakers = make_speakers(3, seed=4)
        scripts = make_scripts(2, seed=4)
        for spk in speakers:
            for script in scripts:
                clip = render_utterance(script, spk)
                assert np.max(np.abs(clip.samples)) <= 1.0
                assert np.all(np.isfinite(clip.samples))


class TestCorpus:
    def test_counts_and_lengths(self):
        items = make_corpus(4, 4, seed=5)
        assert len(items) == 16
        for item in items:
            assert 0.8 <= item.clip.duration <= 1.6
        assert sorted({i.speaker_id for i in items}) == [0, 1, 2, 3]
        assert sorted({i.script_id for i in items}) == [0, 1, 2, 3]

    def test_scripts_shared_across_speakers(self):
        items = make_corpus(3, 2, seed=6)
        by_script = {}
        for item in items:
            by_script.setdefault(item.script_id, []).append(item.speaker_id)
        for speakers in by_script.values():
            assert sorted(speakers) == [0, 1, 2]

    def test_rejects_bad_counts(self):
        with pytest.raises(ValueError):
            make_corpus(0, 4, seed=0)
