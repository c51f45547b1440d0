import pytest

from fsreal.config import config_to_toml, load_config
from fsreal.errors import ConfigError


def write(tmp_path, text):
    p = tmp_path / "c.toml"
    p.write_text(text)
    return p


def test_minimal_config_gets_defaults(tmp_path):
    exp = load_config(write(tmp_path, 'total_clients = 100\ndistribution = "near_normal"\n'))
    s = exp.sim
    assert (s.over_selection_q, s.timeout_t0_s, s.timeout_delta_s, s.max_rounds) == (1.5, 60.0, 5.0, 200)
    assert (s.batch_size, s.learning_rate, s.availability_rate, s.finetune_epochs) == (16, 0.1, 0.3, 5)
    assert exp.seeds == [0, 1] and exp.net_timeout_t0_s == 5.0
    assert exp.sim_config(1).seed == 1


def test_q_below_one_rejected(tmp_path):
    with pytest.raises(ConfigError, match="over_selection_q must be >= 1"):
        load_config(write(tmp_path, "total_clients = 10\nover_selection_q = 0.5\n"))


def test_unknown_key_gets_suggestion(tmp_path):
    with pytest.raises(ConfigError, match="async_goal_K"):
        load_config(write(tmp_path, "total_clients = 10\nasynch_goal = 3\n"))


def test_parse_error_has_line_number(tmp_path):
    with pytest.raises(ConfigError, match=r"c\.toml:4:"):
        load_config(write(tmp_path, "total_clients = 10\nmode = \"sync\"\nseeds = [1,\n"))
    with pytest.raises(ConfigError, match=r"c\.toml:2:"):
        load_config(write(tmp_path, "total_clients = 10\nmode = \n"))


@pytest.mark.parametrize("text,needle", [
    ('total_clients = "ten"\n', "expected int"),
    ("total_clients = 10\nzero_latency = 1\n", "expected bool"),
    ("total_clients = 10\nmax_rounds = true\n", "expected int"),
    ("max_rounds = 3\n", "total_clients is required"),
    ("total_clients = 10\nseeds = [1, 1]\n", "must not repeat"),
    ("total_clients = 10\nseeds = [1, 2]\nrepeats = 3\n", "disagrees"),
    ("total_clients = 10\n[server]\nmode = \"sync\"\n", "tables are not supported"),
    ("total_clients = 10\ndistribution = \"beta_binomial\"\nalpha = 2\n", "needs both alpha and beta"),
])
def test_validation_messages(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(write(tmp_path, text))


def test_repeats_expand_to_seeds(tmp_path):
    assert load_config(write(tmp_path, "total_clients = 10\nrepeats = 3\n")).seeds == [0, 1, 2]


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/c.toml")


def test_toml_roundtrip(tmp_path):
    exp = load_config(write(tmp_path, 'total_clients = 12\nmode = "async"\nseeds = [4]\nalpha = 2.0\nbeta = 3.0\n'
                                      'distribution = "beta_binomial"\n'))
    again = load_config(write(tmp_path, config_to_toml(exp)))
    assert again == exp
