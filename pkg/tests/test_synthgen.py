import numpy as np
import pytest

from flowsage.errors import DataError
from flowsage.flowdata import parse_csv
from flowsage.synthgen import (
    AttackSpec,
    ScenarioConfig,
    balanced_scenario,
    generate,
    load_ground_truth,
    preset_scenario,
    synth_schema,
    write_scenario,
)


class TestMotifs:
    def test_bot_star_all_to_hub(self):
        cfg = ScenarioConfig(
            n_benign=0,
            attacks=[AttackSpec("Bot", 5, {"hub": "H"})],
            n_hosts=8,
            attack_fraction=1.0,
        )
        ds, truth = generate(cfg)
        assert len(ds) == 5
        assert all(r.dst == "H" for r in ds.records)
        assert all(r.label == "Bot" for r in ds.records)
        assert truth["bot_0"] == [0, 1, 2, 3, 4]

    def test_ddos_fan_in_single_victim(self):
        cfg = ScenarioConfig(
            n_benign=0,
            attacks=[AttackSpec("DDoS", 8)],
            n_hosts=12,
            attack_fraction=1.0,
        )
        ds, _ = generate(cfg)
        assert len({r.dst for r in ds.records}) == 1

    def test_infiltration_chain_links(self):
        cfg = ScenarioConfig(
            n_benign=0,
            attacks=[AttackSpec("Infiltration", 6)],
            n_hosts=10,
            attack_fraction=1.0,
        )
        ds, _ = generate(cfg)
        for prev, nxt in zip(ds.records, ds.records[1:]):
            assert prev.dst == nxt.src
            assert prev.src != prev.dst

    def test_bruteforce_parallel_edges(self):
        cfg = ScenarioConfig(
            n_benign=0,
            attacks=[AttackSpec("BruteForce", 7)],
            n_hosts=8,
            attack_fraction=1.0,
        )
        ds, _ = generate(cfg)
        pairs = {(r.src, r.dst) for r in ds.records}
        assert len(pairs) == 1

    def test_unknown_kind_rejected(self):
        cfg = ScenarioConfig(n_benign=0, attacks=[AttackSpec("Worm", 3)], n_hosts=8)
        with pytest.raises(DataError):
            generate(cfg)

    def test_too_few_hosts_rejected(self):
        with pytest.raises(DataError):
            generate(ScenarioConfig(n_benign=1, attacks=[], n_hosts=3))


class TestDatasetProperties:
    def test_attack_fraction_near_target(self):
        cfg = preset_scenario("bot-infiltration", n_flows=5000, seed=1)
        ds, _ = generate(cfg)
        frac = ds.binary_labels().mean()
        assert 0.10 <= frac <= 0.14

    def test_flow_ids_unique(self):
        ds, _ = generate(preset_scenario("bot-infiltration", n_flows=1000, seed=2))
        ids = [r.flow_id for r in ds.records]
        assert len(ids) == len(set(ids))

    def test_ground_truth_ids_exist_and_attacks_only(self):
        ds, truth = generate(preset_scenario("bot-infiltration", n_flows=1000, seed=3))
        by_id = {r.flow_id: r for r in ds.records}
        for ids in truth.values():
            for fid in ids:
                assert by_id[fid].label != "Benign"
        truth_ids = {fid for ids in truth.values() for fid in ids}
        for rec in ds.records:
            if rec.label != "Benign":
                assert rec.flow_id in truth_ids

    def test_attack_bytes_separated_two_sigma(self):
        ds, _ = generate(preset_scenario("bot-infiltration", n_flows=2000, seed=4))
        names = ds.feature_names
        col = names.index("in_bytes")
        x = ds.features()[:, col]
        y = ds.binary_labels().astype(bool)
        assert y.sum() >= 100 and (~y).sum() >= 1000
        benign = x[~y]
        attack = x[y]
        assert abs(attack.mean() - benign.mean()) >= 2.0 * benign.std()

    def test_determinism_byte_identical_csv(self, tmp_path):
        cfg = preset_scenario("bot-infiltration", n_flows=500, seed=5)
        for run in ("a", "b"):
            ds, truth = generate(cfg)
            write_scenario(
                ds, truth, tmp_path / f"{run}.csv", tmp_path / f"{run}.json"
            )
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_csv_reparses_to_same_features(self, tmp_path):
        cfg = preset_scenario("bot", n_flows=300, seed=6)
        ds, truth = generate(cfg)
        write_scenario(ds, truth, tmp_path / "f.csv", tmp_path / "t.json")
        back = parse_csv(tmp_path / "f.csv", synth_schema())
        assert back.feature_names == ds.feature_names
        assert np.array_equal(back.features(), ds.features())
        assert load_ground_truth(tmp_path / "t.json") == truth

    def test_balanced_scenario_sizes_benign(self):
        cfg = balanced_scenario([AttackSpec("Bot", 120)], attack_fraction=0.12)
        assert cfg.n_benign == 880

    def test_extra_noise_features(self):
        cfg = ScenarioConfig(
            n_benign=10, attacks=[], n_hosts=8, feature_dim=11, attack_fraction=0.0
        )
        ds, _ = generate(cfg)
        assert ds.feature_dim == 11
        assert ds.feature_names[-1] == "noise_2"
