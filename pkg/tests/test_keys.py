"""Tests for keys, injection strategies and backdoor-instance generation."""

import logging
from pathlib import Path

import numpy as np
import pytest

from core.errors import (
    InsufficientPoolError,
    InvalidParameterError,
    InvalidWrongKeyError,
    ShapeError,
)
from core.imaging import Image
from core.keys import (
    BackdoorSpec,
    InputInstanceKey,
    PatternKey,
    Strategy,
    accessory_inject,
    blend_inject,
    blended_accessory_inject,
    cartoon_pattern,
    default_anchor,
    generate_backdoor_instances,
    generate_poisons,
    glasses_pattern,
    load_pattern_key,
    load_spec,
    random_pattern,
    sample_backdoor_instance_rand,
    save_pattern_key,
    save_spec,
    spec_from_dict,
    spec_to_dict,
    wrong_key_instances,
)
from core.rng import RngStream
from tests.conftest import SMALL_FRAME


def _images(
    stream: RngStream, count: int, shape: tuple[int, int, int] = SMALL_FRAME
) -> list[Image]:
    generator = stream.generator()
    return [
        Image(generator.integers(0, 256, shape, dtype=np.uint8)) for _ in range(count)
    ]


def _patch_key(stream: RngStream, frame: tuple[int, int, int]) -> PatternKey:
    """A random 3x4 patch with a random transparent region inside ``frame``."""
    generator = stream.generator()
    pattern = Image(generator.integers(0, 256, (3, 4, frame[2]), dtype=np.uint8))
    mask = generator.random((3, 4)) < 0.4
    return PatternKey(pattern, mask, anchor=(1, 2))


class TestInjectionAlgebra:
    """Exact reductions between the pattern strategies."""

    def test_blended_accessory_with_opaque_full_frame_equals_blend(
        self, stream: RngStream
    ) -> None:
        for i in range(1000):
            child = stream.child("triple", i)
            key = random_pattern(SMALL_FRAME, child.child("key"))
            (x,) = _images(child.child("x"), 1)
            alpha = float(child.child("alpha").generator().random())
            expected = blend_inject(key, x, alpha)
            assert blended_accessory_inject(key, x, alpha) == expected

    def test_blended_accessory_at_alpha_one_equals_accessory(
        self, stream: RngStream
    ) -> None:
        for i in range(1000):
            child = stream.child("triple", i)
            key = _patch_key(child.child("key"), SMALL_FRAME)
            (x,) = _images(child.child("x"), 1)
            assert blended_accessory_inject(key, x, 1.0) == accessory_inject(key, x)

    def test_blend_endpoints(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        (x,) = _images(stream.child("x"), 1)
        assert blend_inject(key, x, 0.0) == x
        assert blend_inject(key, x, 1.0) == key.pattern

    def test_blend_is_monotone_in_alpha(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        (x,) = _images(stream.child("x"), 1)
        previous = np.abs(x.pixels.astype(int) - key.pattern.pixels.astype(int))
        for alpha in np.linspace(0.05, 1.0, 20):
            current = np.abs(
                blend_inject(key, x, float(alpha)).pixels.astype(int)
                - key.pattern.pixels.astype(int)
            )
            assert np.all(current <= previous)
            previous = current

    def test_accessory_keeps_transparent_pixels(self, stream: RngStream) -> None:
        key = _patch_key(stream.child("key"), SMALL_FRAME)
        (x,) = _images(stream.child("x"), 1)
        _, opaque = key.placed(SMALL_FRAME)
        injected = accessory_inject(key, x)
        assert np.array_equal(injected.pixels[~opaque], x.pixels[~opaque])
        placed = key.placed(SMALL_FRAME)[0]
        assert np.array_equal(injected.pixels[opaque], placed[opaque])

    def test_blend_rejects_shape_mismatch(self, stream: RngStream) -> None:
        key = random_pattern((4, 4, 3), stream)
        (x,) = _images(stream, 1)
        with pytest.raises(ShapeError):
            blend_inject(key, x, 0.5)

    @pytest.mark.parametrize("alpha", [-0.1, 1.5])
    def test_alpha_outside_unit_interval(self, stream: RngStream, alpha: float) -> None:
        key = random_pattern(SMALL_FRAME, stream)
        (x,) = _images(stream, 1)
        with pytest.raises(InvalidParameterError):
            blend_inject(key, x, alpha)


class TestBackdoorSpec:
    """Test cases for attack definitions."""

    def test_n_must_be_positive(self, random_image: Image) -> None:
        with pytest.raises(InvalidParameterError):
            BackdoorSpec(
                Strategy.INPUT_INSTANCE, InputInstanceKey(random_image), 0, n=0
            )

    def test_strategy_and_key_kind_must_agree(self, random_image: Image) -> None:
        with pytest.raises(InvalidParameterError):
            BackdoorSpec(Strategy.BLENDED, InputInstanceKey(random_image), 0)

    def test_blended_needs_full_frame_key(self) -> None:
        key = glasses_pattern("reading", (32, 32, 3))
        with pytest.raises(InvalidParameterError):
            BackdoorSpec(Strategy.BLENDED, key, 0, alpha_train=0.2, alpha_test=0.2)

    def test_accessory_forces_unit_alphas(self) -> None:
        key = glasses_pattern("reading", (32, 32, 3))
        spec = BackdoorSpec(Strategy.ACCESSORY, key, 0, alpha_train=0.2, alpha_test=0.3)
        assert (spec.alpha_train, spec.alpha_test) == (1.0, 1.0)


class TestInputInstanceKey:
    """Test cases for noisy key draws, poisons and backdoor instances."""

    def test_draws_stay_within_noise_bound(
        self, random_image: Image, stream: RngStream
    ) -> None:
        key = InputInstanceKey(random_image, 5.0)
        for i in range(50):
            draw = sample_backdoor_instance_rand(key, stream.child(i))
            delta = draw.pixels.astype(int) - random_image.pixels.astype(int)
            assert np.abs(delta).max() <= 5

    def test_poisons_carry_target_label(
        self, random_image: Image, stream: RngStream
    ) -> None:
        key = InputInstanceKey(random_image)
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, key, 2, n=5)
        poisons = generate_poisons(spec, [], stream)
        assert len(poisons) == 5
        assert {p.label for p in poisons} == {2}

    def test_poisons_are_deterministic(self, random_image: Image) -> None:
        key = InputInstanceKey(random_image)
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, key, 0, n=3)
        first = generate_poisons(spec, [], RngStream(9))
        second = generate_poisons(spec, [], RngStream(9))
        assert [p.instance for p in first] == [p.instance for p in second]

    def test_include_key_prepends_key(
        self, random_image: Image, stream: RngStream
    ) -> None:
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, InputInstanceKey(random_image), 0)
        instances = generate_backdoor_instances(
            spec, [], stream, count=4, include_key=True
        )
        assert len(instances) == 5
        assert instances[0] == random_image

    def test_collisions_with_poisons_are_redrawn(
        self, random_image: Image, stream: RngStream, caplog: pytest.LogCaptureFixture
    ) -> None:
        """With zero noise every draw equals the key, so every draw collides."""
        key = InputInstanceKey(random_image, 0.0)
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, key, 0)
        with caplog.at_level(logging.WARNING):
            instances = generate_backdoor_instances(
                spec, [], stream, count=2, avoid=[random_image]
            )
        assert len(instances) == 2
        assert "collided" in caplog.text

    def test_wrong_instance_key_needs_non_target_label(
        self, random_image: Image, stream: RngStream
    ) -> None:
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, InputInstanceKey(random_image), 0)
        (other,) = _images(stream.child("other"), 1)
        with pytest.raises(InvalidWrongKeyError):
            wrong_key_instances(
                spec, InputInstanceKey(other, source_label=0), [], stream
            )
        wrong = wrong_key_instances(
            spec, InputInstanceKey(other, source_label=1), [], stream, 3
        )
        assert [w.ground_truth for w in wrong] == [1, 1, 1]

    def test_identical_wrong_key_rejected(
        self, random_image: Image, stream: RngStream
    ) -> None:
        key = InputInstanceKey(random_image, source_label=1)
        spec = BackdoorSpec(Strategy.INPUT_INSTANCE, key, 0)
        with pytest.raises(InvalidWrongKeyError):
            wrong_key_instances(spec, key, [], stream)


class TestPatternAttacks:
    """Test cases for pattern-key poisons and instances."""

    def test_poisons_sample_pool_without_replacement(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        pool = _images(stream.child("pool"), 6)
        spec = BackdoorSpec(
            Strategy.BLENDED, key, 1, alpha_train=0.2, alpha_test=0.2, n=6
        )
        poisons = generate_poisons(spec, pool, stream)
        assert sorted(p.origin["pool_index"] for p in poisons) == list(range(6))

    def test_pool_too_small(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        spec = BackdoorSpec(
            Strategy.BLENDED, key, 1, alpha_train=0.2, alpha_test=0.2, n=3
        )
        with pytest.raises(InsufficientPoolError):
            generate_poisons(spec, _images(stream, 2), stream)

    def test_backdoor_instances_use_alpha_test(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        pool = _images(stream.child("pool"), 3)
        spec = BackdoorSpec(Strategy.BLENDED, key, 1, alpha_train=0.2, alpha_test=0.5)
        instances = generate_backdoor_instances(spec, pool, stream)
        assert instances == [blend_inject(key, x, 0.5) for x in pool]

    def test_wrong_pattern_skips_target_ground_truth(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream.child("key"))
        wrong = cartoon_pattern(SMALL_FRAME, stream.child("wrong"))
        images = _images(stream.child("pool"), 4)
        pool = list(zip(images, [0, 1, 2, 0], strict=True))
        spec = BackdoorSpec(Strategy.BLENDED, key, 0, alpha_train=0.2, alpha_test=0.2)
        instances = wrong_key_instances(spec, wrong, pool, stream)
        assert [w.ground_truth for w in instances] == [1, 2]
        assert instances[0].instance == blend_inject(wrong, images[1], 0.2)


class TestKeyCatalogue:
    """Test cases for the procedural keys."""

    def test_random_pattern_is_full_frame(self, stream: RngStream) -> None:
        key = random_pattern(SMALL_FRAME, stream)
        assert key.is_full_frame
        assert key.pattern.shape == SMALL_FRAME

    def test_reading_glasses_have_transparent_lenses(self) -> None:
        key = glasses_pattern("reading", (32, 32, 3), scale="large")
        sunglasses = glasses_pattern("sunglasses", (32, 32, 3), scale="large")
        assert key.transparent_mask[4, 8]
        assert not sunglasses.transparent_mask[4, 8]
        assert (~sunglasses.transparent_mask).sum() > (~key.transparent_mask).sum()

    def test_glasses_fit_the_frame_at_every_scale(self) -> None:
        for scale in ("small", "medium", "large"):
            key = glasses_pattern("reading", (32, 32, 3), scale=scale)
            overlay, opaque = key.placed((32, 32, 3))
            assert overlay.shape == (32, 32, 3)
            assert opaque.any()

    def test_unknown_style(self) -> None:
        with pytest.raises(InvalidParameterError):
            glasses_pattern("monocle", (32, 32, 3))

    def test_default_anchor_centres_on_eye_region(self) -> None:
        assert default_anchor((32, 32, 3), (7, 24)) == (7, 4)


class TestSerialisation:
    """Test cases for saving keys and specs."""

    def test_pattern_key_round_trip(self, tmp_path: Path) -> None:
        key = glasses_pattern("sunglasses", (32, 32, 3), scale="small")
        save_pattern_key(key, tmp_path / "key")
        loaded = load_pattern_key(tmp_path / "key")
        assert loaded.same_as(key)
        assert loaded.scale_presets == key.scale_presets

    def test_instance_spec_round_trip(
        self, random_image: Image, tmp_path: Path
    ) -> None:
        spec = BackdoorSpec(
            Strategy.INPUT_INSTANCE, InputInstanceKey(random_image, 4.0, 2), 1, n=7
        )
        save_spec(spec, tmp_path / "spec")
        loaded = load_spec(tmp_path / "spec")
        assert loaded.key.same_as(spec.key)
        assert (loaded.n, loaded.target_label) == (7, 1)

    def test_spec_dict_describes_pattern_key(self) -> None:
        key = glasses_pattern("reading", (32, 32, 3), scale="small")
        spec = BackdoorSpec(
            Strategy.BLENDED_ACCESSORY, key, 2, alpha_train=0.2, alpha_test=1.0, n=4
        )
        data = spec_to_dict(spec)
        assert data["strategy"] == "blended-accessory"
        assert data["key"] == {"kind": "pattern", "name": key.name, "scale": "small"}
        rebuilt = spec_from_dict(data, key)
        assert (rebuilt.strategy, rebuilt.target_label, rebuilt.n) == (
            Strategy.BLENDED_ACCESSORY,
            2,
            4,
        )
        assert rebuilt.alpha_train == 0.2
