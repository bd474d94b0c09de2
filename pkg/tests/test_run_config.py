import pytest
from config import NEGATIVE_PROMPT, RESOLVED_CONFIG_FILE
from utils.errors import ConfigurationError
from utils.run_config import RunConfig, load_run_config, parse_run_config
from utils.utils import format_int_list, parse_bool, parse_int_list, quote_value


def _write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParsing:
    def test_defaults(self):
        rc = load_run_config()
        assert rc == RunConfig()
        plan = rc.plan()
        assert plan.l1 == frozenset({4}) and plan.l2 == frozenset(range(4, 12))
        assert (plan.tau_conv, plan.tau_sa, plan.tau_ta, plan.T) == (0.2, 0.2, 0.5, 50)
        assert rc.negative_prompt == NEGATIVE_PROMPT
        assert rc.codec().latent_channels == 192

    def test_file_with_comments(self, tmp_path):
        path = _write(tmp_path, "# toy run\nsteps = 20\ntau_ta = 0.3\nl2 = 4,5,6\nprompt = \"a red car\"\ninverted_init = false\n")
        rc = load_run_config(path)
        assert rc.steps == 20 and rc.tau_ta == 0.3
        assert rc.l2 == (4, 5, 6)
        assert rc.prompt == "a red car"
        assert rc.inverted_init is False
        assert rc.plan().T == 20

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigurationError) as info:
            load_run_config(_write(tmp_path, "stepz = 20\n"))
        assert info.value.key == "stepz"

    def test_bad_value(self, tmp_path):
        with pytest.raises(ConfigurationError) as info:
            load_run_config(_write(tmp_path, "tau_sa = lots\n"))
        assert info.value.key == "tau_sa"

    def test_out_of_range_threshold(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_run_config(_write(tmp_path, "tau_ta = 1.5\n"))

    def test_layer_beyond_decoder(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_run_config(_write(tmp_path, "l1 = 12\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_run_config(str(tmp_path / "absent.cfg"))

    def test_overrides_win(self, tmp_path):
        rc = load_run_config(_write(tmp_path, "prompt = from file\n"), {"prompt": "from flag"})
        assert rc.prompt == "from flag"


class TestPresets:
    def test_small_preset_remaps_layers(self):
        rc = parse_run_config({"preset": "small"})
        assert (rc.depth, rc.decoder_layer_count) == (2, 6)
        assert rc.l1 == (2,)
        assert rc.l2 == rc.l3 == (2, 3, 4, 5)

    def test_explicit_keys_override_preset(self):
        rc = parse_run_config({"preset": "small", "l1": "3"})
        assert rc.l1 == (3,)

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            parse_run_config({"preset": "huge"})

    def test_model_from_preset(self):
        model = parse_run_config({"preset": "small", "patch": "2"}).model(12)
        assert model.config.depth == 2 and model.config.latent_channels == 12


class TestResolvedConfig:
    def test_rendered_file_parses_back(self, tmp_path):
        rc = parse_run_config({"preset": "small", "prompt": 'say "hi" \\ bye', "steps": "7", "feature_steps": "0,3"})
        rc.write_resolved(str(tmp_path))
        assert load_run_config(str(tmp_path / RESOLVED_CONFIG_FILE)) == rc

    def test_rendering_is_stable(self):
        text = RunConfig().render()
        assert text == RunConfig().render()
        lines = text.splitlines()
        assert lines[0] == 'preset = "default"'
        assert "l2 = 4,5,6,7,8,9,10,11" in lines
        assert "tau_ta = 0.5" in lines
        assert "inverted_init = true" in lines


class TestHelpers:
    def test_int_lists(self):
        assert parse_int_list("4, 5,6") == (4, 5, 6)
        assert parse_int_list("4-7") == (4, 5, 6, 7)
        assert parse_int_list("") == ()
        assert format_int_list({3, 1, 2}) == "1,2,3"

    def test_bool(self):
        assert parse_bool("Yes") is True and parse_bool("0") is False
        with pytest.raises(ValueError):
            parse_bool("maybe")

    def test_quote(self):
        assert quote_value('a "b"') == '"a \\"b\\""'
