import pytest

from asia.cli import main
from asia.harness import (
    ExpectationFailed,
    ScenarioError,
    UnknownScenario,
    describe_scenario,
    list_scenarios,
    load_scenario,
    parse_scenario,
    recount,
    run_scenario,
)
from asia.netsim import parse_log

from conftest import PUBLIC_TOPOLOGY, write_scenario

BUNDLED = {
    "modes_nat", "modes_public", "keepalive_binding", "rebind_24h", "tamper_proxy", "acl_matrix", "tan_misuse",
    "credential_swap", "integrity_fail", "fanout_1000", "rogue_flow_monitor", "price_signal_demo",
}
ACL = "dno-1@DistributionNetworkOperator gw-1 IssueCommand,GetStatus\n"
SMALL = """\
name small
seed 3
broker broker
gateway gw-1 appliances=Washer:2,Washer:2
requestor dno-1 role=DistributionNetworkOperator node=dno
at 1000 dno-1 session prx gw-1 Proxy IssueCommand shutoff Washer 1
at 2000 dno-1 session inv gw-1 Invocation GetStatus status
expect outcome prx ok
expect outcome inv ok
expect count gw.command == 2
run 10000
"""


@pytest.fixture
def small(tmp_path):
    return write_scenario(tmp_path / "small", SMALL, PUBLIC_TOPOLOGY, ACL)


@pytest.fixture
def failing(tmp_path):
    return write_scenario(tmp_path / "failing", SMALL.replace("gw.command == 2", "gw.command == 3"),
                          PUBLIC_TOPOLOGY, ACL)


def test_list_has_every_required_scenario():
    names = {n for n, _ in list_scenarios()}
    assert BUNDLED <= names
    assert all(desc for _, desc in list_scenarios())


def test_describe_modes_nat():
    text = describe_scenario("modes_nat")
    for word in ("Invocation", "Redirect", "Proxy", "NAT"):
        assert word in text


def test_describe_unknown():
    with pytest.raises(UnknownScenario):
        describe_scenario("no_such_scenario")


def test_load_by_directory_file_or_name(small):
    assert load_scenario(small).name == "small"
    assert load_scenario(small / "scenario.txt").name == "small"
    assert load_scenario("modes_nat").name == "modes_nat"


@pytest.mark.parametrize("line", [
    "bogus record\n",
    "at 1000 nobody session x gw-1 Proxy GetStatus\n",
    "at 99999 dno-1 session x gw-1 Proxy GetStatus\n",
    "expect nonsense 1\n",
    "gateway dno-1\n",
])
def test_parse_errors_carry_file_and_line(tmp_path, line):
    # two header lines come from write_scenario
    lineno = 8
    text = "seed 1\nbroker broker\ngateway gw-1\nrequestor dno-1 role=DistributionNetworkOperator node=dno\nrun 10000\n"
    d = write_scenario(tmp_path, text + line, PUBLIC_TOPOLOGY, ACL)
    with pytest.raises(ScenarioError) as info:
        load_scenario(d)
    assert info.value.lineno == lineno
    assert f"scenario.txt:{lineno}:" in str(info.value)


def test_missing_referenced_file_fails_before_run(tmp_path):
    d = write_scenario(tmp_path, "acl missing.txt\nbroker broker\n", PUBLIC_TOPOLOGY)
    with pytest.raises(ScenarioError, match="scenario.txt:3"):
        load_scenario(d)


def test_bad_acl_line_reports_acl_file(tmp_path):
    d = write_scenario(tmp_path, "broker broker\n", PUBLIC_TOPOLOGY, "dno-1@Nobody gw-1 GetStatus\n")
    with pytest.raises(ScenarioError, match=r"acl\.txt:1"):
        load_scenario(d)


def test_for_loop_expansion(tmp_path):
    sc = parse_scenario("topology topology.txt\nfor i=1..3: gateway gw-{i} node=gw-1\n",
                        write_scenario(tmp_path, "", PUBLIC_TOPOLOGY))
    assert [a.name for a in sc.actors] == ["gw-1", "gw-2", "gw-3"]


def test_report_counts_match_recount(small):
    res = run_scenario(small)
    rep = res.report
    assert rep.passed and res.exit_status == 0
    counts = recount(res.log.lines)
    assert rep.sessions == counts["sessions"] == {"Proxy": (1, 0), "Invocation": (1, 0)}
    assert rep.drops == counts["drops"]
    assert dict(rep.audit) == {"sessions": True, "drops": True, "conservation": True}
    assert rep.events == len(res.log.lines) == len(parse_log(res.log.lines))


def test_report_text_is_versioned_and_parseable(small):
    lines = run_scenario(small).report.lines()
    assert lines[0] == "# asia-report 1"
    keys = [line.split()[0] for line in lines[1:]]
    assert keys[:6] == ["scenario", "seed", "hash", "digest", "events", "sim_end"]
    assert lines[-1] == "result PASS"


def test_failed_expectation(failing):
    res = run_scenario(failing)
    assert res.exit_status == 1
    assert res.report.text().rstrip().endswith("result FAIL")
    with pytest.raises(ExpectationFailed) as info:
        res.raise_for_failures()
    assert info.value.failures == ["count gw.command == 3"]


def test_seed_override_changes_digest(small):
    a = run_scenario(small).report
    b = run_scenario(small, seed=4).report
    assert a.seed == 3 and b.seed == 4
    assert a.digest != b.digest


# -- command line -----------------------------------------------------------------------


def test_cli_run_pass_writes_log_and_report(small, tmp_path, capsys):
    log, report = tmp_path / "events.log", tmp_path / "report.txt"
    assert main(["run", str(small), "--log", str(log), "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert out == report.read_text()
    assert out.startswith("# asia-report 1\n")
    digest = next(line.split()[1] for line in out.splitlines() if line.startswith("digest "))
    import hashlib
    assert hashlib.sha256(log.read_bytes()).hexdigest() == digest


def test_cli_run_by_flag_and_quiet(small, capsys):
    assert main(["run", "--scenario", str(small), "--quiet", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("\n") == 1 and out.startswith("small: PASS")


def test_cli_failed_expectation_exits_1(failing, capsys):
    assert main(["run", str(failing), "--quiet"]) == 1
    assert "failed: count gw.command == 3" in capsys.readouterr().out


def test_cli_unknown_scenario_exits_2(capsys):
    assert main(["run", "no_such_scenario"]) == 2
    assert "unknown scenario" in capsys.readouterr().err


def test_cli_parse_error_exits_2(tmp_path, capsys):
    d = write_scenario(tmp_path, "broker broker\nat x\n", PUBLIC_TOPOLOGY)
    assert main(["run", str(d)]) == 2
    assert "scenario.txt:4:" in capsys.readouterr().err


def test_cli_bad_flags_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["run", "--seed", "abc", "modes_nat"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2


def test_cli_list_and_describe(capsys):
    assert main(["list"]) == 0
    listed = {line.split()[0] for line in capsys.readouterr().out.splitlines()}
    assert BUNDLED <= listed
    assert main(["describe", "tan_misuse"]) == 0
    assert capsys.readouterr().out.startswith("tan_misuse:")
    assert main(["describe", "nope"]) == 2


def test_cli_bundled_modes_nat(capsys):
    assert main(["run", "modes_nat"]) == 0
    out = capsys.readouterr().out
    assert "expect PASS outcome red error ConnectTimeout" in out
    assert "sessions mode=Redirect ok=0 fail=1" in out
