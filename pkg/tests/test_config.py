import numpy as np
import pytest

from adml.attacks import AttackMethod
from adml.config import (
    PRESET_NAMES,
    config_hash,
    parse_config,
    preset_text,
    serialize_config,
)
from adml.losses import LossKind, PerturbTarget
from adml.numerics import Norm
from adml.training import Formulation


class TestParseConfig:
    def test_empty_document_is_all_defaults(self):
        cfg = parse_config("")
        assert cfg["data.input_dim"] == 3072
        assert cfg["train.loss"] is LossKind.CONTRASTIVE
        assert cfg["train.formulation"] is Formulation.NATURAL
        assert cfg["attack.epsilon"] == 0.01
        assert cfg.seeds == (1, 2, 3, 4, 5)

    def test_values_and_comments(self):
        text = """
        # a comment line
        data.input_dim = 64   # trailing comment
        train.loss = triplet
        train.perturb_target = negative
        train.attack.method = cw
        eval.attacks = pgd,fgsm,cw
        attack.norm = l2
        run.seeds = 7,8
        """
        cfg = parse_config(text)
        assert cfg["data.input_dim"] == 64
        assert cfg["train.loss"] is LossKind.TRIPLET
        assert cfg["train.perturb_target"] is PerturbTarget.NEGATIVE
        assert cfg["train.attack.method"] is AttackMethod.CW
        assert cfg.eval_attacks == (AttackMethod.PGD, AttackMethod.FGSM, AttackMethod.CW)
        assert cfg["attack.norm"] is Norm.L2
        assert cfg.seeds == (7, 8)

    def test_unknown_key_names_line(self):
        with pytest.raises(ValueError, match="line 2: unknown key 'bogus.key'"):
            parse_config("\nbogus.key = 3\n")

    def test_negative_epsilon_rejected_with_line(self):
        with pytest.raises(ValueError, match="line 1.*epsilon must be >= 0"):
            parse_config("attack.epsilon = -1")

    def test_bad_enum_value(self):
        with pytest.raises(ValueError, match="train.loss"):
            parse_config("train.loss = hinge")

    def test_bad_syntax(self):
        with pytest.raises(ValueError, match="line 1: expected"):
            parse_config("data.input_dim 64")

    def test_cross_key_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            parse_config("train.batch_size = 5\ntrain.samples_per_class = 2")

    def test_round_trip_canonical(self):
        text = """
        data.sigma = 0.075
        train.lr = 2.5e-05
        train.attack.step_size =
        eval.attacks = pgd,cw
        """
        cfg = parse_config(text)
        assert parse_config(serialize_config(cfg)) == cfg
        assert cfg["train.attack.step_size"] is None

    def test_round_trip_all_presets(self):
        for name in PRESET_NAMES:
            cfg = parse_config(preset_text(name))
            assert parse_config(serialize_config(cfg)) == cfg

    def test_hash_stable_and_sensitive(self):
        a = parse_config("")
        b = parse_config("data.sigma = 0.03")
        assert config_hash(a) == config_hash(parse_config(""))
        assert config_hash(a) != config_hash(b)


class TestTypedViews:
    def test_train_config_construction(self):
        cfg = parse_config("train.formulation = f2\ntrain.attack_rate = 0.25")
        tc = cfg.train_config(master_seed=9)
        assert tc.formulation is Formulation.F2
        assert tc.attack_rate == 0.25
        assert tc.master_seed == 9

    def test_overrides(self):
        cfg = parse_config("")
        tc = cfg.train_config(1, formulation=Formulation.F2, attack_rate=0.75,
                              perturb_target=PerturbTarget.ANCHOR)
        assert tc.formulation is Formulation.F2
        assert tc.attack_rate == 0.75
        assert tc.perturb_target is PerturbTarget.ANCHOR

    def test_eval_attack_cw_iterations(self):
        cfg = parse_config("attack.iterations = 5\nattack.cw_iterations = 50")
        assert cfg.eval_attack(AttackMethod.PGD).iterations == 5
        assert cfg.eval_attack(AttackMethod.CW).iterations == 50

    def test_mixture_config_uses_run_seed(self):
        cfg = parse_config("data.input_dim = 16")
        assert cfg.mixture_config(3).seed == 3
        assert cfg.mixture_config(3).input_dim == 16

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            preset_text("nope")
