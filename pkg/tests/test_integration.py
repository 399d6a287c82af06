"""Cross-backend consistency, measured growth laws, and CLI smoke tests."""

import json

import pytest

from coedge import bench as B
from coedge import client as C
from coedge import model as M
from coedge import protocol as P
from coedge import prompts as PR
from coedge import server as S
from coedge.channels import SocketChannel

PROMPT = [4, 8, 15, 16, 23, 42]


class TestMeasuredGrowthLaws:
    def test_measured_bytes_fit_closed_forms_at_three_lengths(self):
        """Naive grows quadratically, collaborative linearly; measured byte
        totals at T in {25, 50, 100} equal the closed-form models exactly."""
        cfg = M.tiny_config(max_seq_len=128)
        mdl = M.build_model(cfg, seed=2)
        d = cfg.hidden_dim
        for T_new in (25, 50, 100):
            collab = C.EdgeConfig(
                mode="collaborative", theta=1.5, wire_precision="f16", max_new_tokens=T_new
            )
            ch = C.build_sim_channel(mdl, collab)
            r = C.run_collaborative(mdl, PROMPT, collab, ch, session_id=1)
            expected = B.analytic_bytes(len(PROMPT), len(r.tokens), d, "f16", "collaborative")
            assert r.bytes_up == expected.framed_up

            naive = C.EdgeConfig(mode="naive-split", max_new_tokens=T_new)
            ch2 = C.build_sim_channel(mdl, naive)
            r2 = C.run_naive_split(mdl, PROMPT, naive, ch2, session_id=1)
            expected2 = B.analytic_bytes(len(PROMPT), len(r2.tokens), d, "f32", "naive")
            assert r2.bytes_up == expected2.framed_up


class TestCrossBackendAccounting:
    def test_socket_and_sim_ledgers_agree(self, tiny_model):
        """Byte accounting is identical between the two transport backends."""
        config = C.EdgeConfig(
            mode="collaborative", theta=1.5, wire_precision="f32", max_new_tokens=6
        )
        sim_channel = C.build_sim_channel(tiny_model, config)
        sim_result = C.run_collaborative(tiny_model, PROMPT, config, sim_channel, session_id=3)

        srv = S.SocketServer(tiny_model, mode=S.MODE_PARTITION, port=0, sweep_s=3600.0)
        srv.start()
        try:
            sock_channel = SocketChannel(srv.address, wire_encoding=P.ENC_F32)
            sock_result = C.run_collaborative(
                tiny_model, PROMPT, config, sock_channel, session_id=3
            )
        finally:
            srv.stop()
        assert sock_result.tokens == sim_result.tokens
        assert sock_result.bytes_up == sim_result.bytes_up
        assert sock_result.bytes_down == sim_result.bytes_down

    def test_socket_full_model_matches_sim(self, tiny_model):
        config = C.EdgeConfig(mode="cloud-only", max_new_tokens=6)
        sim_channel = C.build_sim_channel(tiny_model, config)
        sim_result = C.run_cloud_only(tiny_model, PROMPT, config, sim_channel, session_id=4)

        srv = S.SocketServer(tiny_model, mode=S.MODE_FULL, port=0, sweep_s=3600.0)
        srv.start()
        try:
            sock_channel = SocketChannel(srv.address)
            sock_result = C.run_cloud_only(tiny_model, PROMPT, config, sock_channel, session_id=4)
        finally:
            srv.stop()
        assert sock_result.tokens == sim_result.tokens
        assert sock_result.bytes_up == sim_result.bytes_up
        assert sock_result.bytes_down == sim_result.bytes_down


class TestClientCli:
    def test_sim_run_with_traces(self, tiny_model_file, tmp_path, capsys):
        prompts_path = tmp_path / "p.txt"
        PR.save_prompt_file(str(prompts_path), [[1, 2, 3, 4], [9, 8, 7]])
        trace_path = tmp_path / "t.jsonl"
        rc = C.main(
            [
                "--model", tiny_model_file,
                "--mode", "collaborative",
                "--theta", "1.5",
                "--wire-precision", "f32",
                "--max-new-tokens", "5",
                "--prompts", str(prompts_path),
                "--sim",
                "--trace-out", str(trace_path),
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "prompt 0:" in out and "prompt 1:" in out
        lines = trace_path.read_text().strip().splitlines()
        assert len(lines) == 10
        assert all("origin" in json.loads(ln) for ln in lines)

    def test_standalone_needs_no_server(self, tiny_model_file, tmp_path, capsys):
        prompts_path = tmp_path / "p.txt"
        PR.save_prompt_file(str(prompts_path), [[5, 6, 7]])
        rc = C.main(
            [
                "--model", tiny_model_file,
                "--mode", "standalone",
                "--max-new-tokens", "4",
                "--prompts", str(prompts_path),
                "--sim",
            ]
        )
        assert rc == 0
        assert "bytes up/down 0/0" in capsys.readouterr().out

    def test_requires_backend_choice(self, tiny_model_file, tmp_path):
        prompts_path = tmp_path / "p.txt"
        PR.save_prompt_file(str(prompts_path), [[1, 2]])
        with pytest.raises(SystemExit):
            C.main(["--model", tiny_model_file, "--prompts", str(prompts_path)])


class TestServerCli:
    def test_sim_selfcheck_partition(self, tiny_model_file, capsys):
        rc = S.main(["--model", tiny_model_file, "--sim"])
        assert rc == 0
        assert "selfcheck OK" in capsys.readouterr().out

    def test_sim_selfcheck_full(self, tiny_model_file, capsys):
        rc = S.main(["--model", tiny_model_file, "--mode", "full", "--sim"])
        assert rc == 0
        assert "selfcheck OK" in capsys.readouterr().out


class TestBenchCli:
    def test_bytes_subcommand(self, capsys):
        rc = B.main(
            [
                "bytes",
                "--prompt-len", "30",
                "--new-tokens", "100",
                "--hidden-dim", "4096",
                "--precision", "f16",
                "--strategy", "collaborative",
            ]
        )
        assert rc == 0
        assert "payload_bytes=1064960" in capsys.readouterr().out

    def test_run_and_hist_subcommands(self, tiny_model_file, tmp_path, capsys):
        prompts_path = tmp_path / "p.txt"
        PR.save_prompt_file(str(prompts_path), [[1, 2, 3, 4, 5]])
        scenario_path = tmp_path / "s.toml"
        scenario_path.write_text(
            "\n".join(
                [
                    f'model = "{tiny_model_file}"',
                    'mode = "collaborative"',
                    "theta = 0.0",
                    f'prompts = "{prompts_path}"',
                    "max_new_tokens = 6",
                    "repetitions = 1",
                ]
            )
        )
        report_path = tmp_path / "r.json"
        hist_path = tmp_path / "h.csv"
        rc = B.main(
            ["run", str(scenario_path), "--out", str(report_path), "--hist-out", str(hist_path)]
        )
        assert rc == 0
        doc = json.loads(report_path.read_text())
        B.validate_report(doc)
        assert hist_path.read_text().startswith("exit,count,")

        # hist subcommand over a client trace file
        trace_path = tmp_path / "t.jsonl"
        config = C.EdgeConfig(mode="collaborative", theta=0.0, max_new_tokens=5)
        channel = C.build_sim_channel(M.load_model(tiny_model_file), config)
        result = C.run_collaborative(
            M.load_model(tiny_model_file), [1, 2, 3], config, channel, session_id=1
        )
        C.write_traces(str(trace_path), [result])
        hist2 = tmp_path / "h2.csv"
        rc = B.main(["hist", str(trace_path), "--out", str(hist2)])
        assert rc == 0
        assert hist2.exists()

    def test_genmodel_subcommand(self, tmp_path, capsys):
        out = tmp_path / "desk.celm"
        rc = B.main(["genmodel", "--out", str(out), "--seed", "7"])
        assert rc == 0
        mdl = M.load_model(str(out))
        assert mdl.config.num_layers == 8
        assert mdl.config.vocab_size == 260
