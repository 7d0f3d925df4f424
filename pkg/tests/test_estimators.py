import numpy as np
import pytest
from sklearn.base import clone
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline

from minikd.estimators import (
    CNNClassifier,
    DistilledCNNClassifier,
    ImageResizer,
    PixelNormalizer,
    check_images,
)
from minikd.synth import synth_images

FAST = dict(width=4, stages=1, learning_rate=1e-3, batch_size=16, epochs=2)


@pytest.fixture(scope="module")
def raw():
    imgs, labels = synth_images(30, 16, seed=2)
    return imgs, labels


@pytest.fixture(scope="module")
def scaled(raw):
    return raw[0].astype(np.float32) / 255, raw[1]


class TestValidation:
    def test_adds_channel_axis(self):
        assert check_images(np.zeros((3, 5, 5))).shape == (3, 1, 5, 5)

    @pytest.mark.parametrize("bad", [np.zeros((3, 5)), np.zeros((0, 4, 4)), np.full((1, 2, 2), np.nan)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            check_images(bad)

    def test_label_count(self, scaled):
        with pytest.raises(ValueError):
            CNNClassifier(**FAST).fit(scaled[0], scaled[1][:-1])

    def test_single_class(self, scaled):
        with pytest.raises(ValueError, match="two classes"):
            CNNClassifier(**FAST).fit(scaled[0], np.zeros(len(scaled[1])))

    def test_unknown_architecture(self, scaled):
        with pytest.raises(ValueError):
            CNNClassifier(architecture="vgg", **FAST).fit(*scaled)

    def test_predict_before_fit(self, scaled):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            CNNClassifier().predict(scaled[0])


class TestTransformers:
    def test_normalizer(self, raw):
        out = PixelNormalizer().fit(raw[0]).transform(raw[0])
        assert out.shape == (60, 1, 16, 16) and out.max() <= 1.0
        np.testing.assert_allclose(out[:, 0] * 255, raw[0], atol=1e-4)

    def test_resizer(self, scaled):
        out = ImageResizer(8).fit_transform(scaled[0])
        assert out.shape == (60, 1, 8, 8)
        with pytest.raises(ValueError):
            ImageResizer(0).fit(scaled[0])


class TestClassifier:
    def test_params_and_clone(self):
        est = CNNClassifier(architecture="teacher", epochs=3)
        assert est.get_params()["epochs"] == 3 and est.get_params()["learning_rate"] == 1e-5
        c = clone(est)
        assert c.get_params() == est.get_params() and c is not est

    def test_fit_predict(self, scaled):
        est = CNNClassifier(**FAST).fit(*scaled)
        proba = est.predict_proba(scaled[0])
        assert proba.shape == (60, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
        assert set(est.predict(scaled[0])) <= {0, 1}
        assert len(est.loss_history_) == 2 and est.n_params_ > 0
        assert np.array_equal(est.predict(scaled[0]), est.decision_function(scaled[0]).argmax(axis=1))

    def test_string_labels(self, scaled):
        y = np.where(scaled[1] == 1, "covid", "normal")
        est = CNNClassifier(**FAST).fit(scaled[0], y)
        assert set(est.predict(scaled[0])) <= {"covid", "normal"}
        assert list(est.classes_) == ["covid", "normal"]

    def test_deterministic(self, scaled):
        a = CNNClassifier(**FAST, random_state=4).fit(*scaled)
        b = CNNClassifier(**FAST, random_state=4).fit(*scaled)
        assert a.model_.param_digest() == b.model_.param_digest()

    def test_pipeline_and_cross_val(self, raw):
        pipe = make_pipeline(PixelNormalizer(), CNNClassifier(**FAST))
        scores = cross_val_score(pipe, raw[0], raw[1], cv=2)
        assert scores.shape == (2,) and np.all((0 <= scores) & (scores <= 1))


class TestDistilled:
    def test_prefitted_teacher_unchanged(self, scaled):
        teacher = CNNClassifier(architecture="teacher", **FAST).fit(*scaled)
        digest = teacher.model_.param_digest()
        student = DistilledCNNClassifier(teacher=teacher, alpha=0.5, temperature=2.0, **FAST).fit(*scaled)
        assert teacher.model_.param_digest() == digest
        assert teacher.model_.trainable
        assert student.model_.kind == "student" and student.teacher_ is teacher
        assert student.n_params_ < teacher.n_params_

    def test_unfitted_teacher_is_cloned(self, scaled):
        t = CNNClassifier(architecture="teacher", **FAST)
        s = DistilledCNNClassifier(teacher=t, **FAST).fit(*scaled)
        assert not hasattr(t, "model_") and hasattr(s.teacher_, "model_")

    def test_student_as_teacher_rejected(self, scaled):
        wrong = CNNClassifier(architecture="student", **FAST).fit(*scaled)
        with pytest.raises(ValueError):
            DistilledCNNClassifier(teacher=wrong, **FAST).fit(*scaled)

    def test_bad_alpha(self, scaled):
        with pytest.raises(ValueError):
            DistilledCNNClassifier(alpha=2.0, **FAST).fit(*scaled)

    def test_same_init_as_baseline(self, scaled):
        base = CNNClassifier(**dict(FAST, epochs=0)).fit(*scaled)
        t = CNNClassifier(architecture="teacher", **FAST).fit(*scaled)
        dist = DistilledCNNClassifier(teacher=t, **dict(FAST, epochs=0)).fit(*scaled)
        assert base.model_.param_digest() == dist.model_.param_digest()
