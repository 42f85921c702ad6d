import random
import sys
from pathlib import Path

import pytest

from asia.auth import AuthResult, Method, TokenIssuer
from asia.crypto import CertificateAuthority, TrustStore, make_scheme
from asia.harness import parse_scenario, start_scenario
from asia.model import Identity, RoleKind


def write_scenario(root: Path, scenario: str, topology: str, acl: str = "", faults: str = "") -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "topology.txt").write_text(topology)
    (root / "acl.txt").write_text(acl)
    head = "topology topology.txt\nacl acl.txt\n"
    if faults:
        (root / "faults.txt").write_text(faults)
        head += "faults faults.txt\n"
    (root / "scenario.txt").write_text(head + scenario)
    return root


def runner_for(root: Path, scenario: str, topology: str, acl: str = "", faults: str = "", seed=None):
    d = write_scenario(root, scenario, topology, acl, faults)
    sc = parse_scenario((d / "scenario.txt").read_text(), d)
    return start_scenario(sc, seed)


PUBLIC_TOPOLOGY = """\
node broker
node core router
node dno
node gw-1
link broker core 10
link dno core 10
link gw-1 core 15
"""

NAT_TOPOLOGY = """\
node broker
node core router
node dno
node gw-1 behind=nat-1
nat nat-1 pool=198.51.100.10,198.51.100.11 policy=drop
link broker core 10
link dno core 10
link nat-1 core 15
link gw-1 nat-1 1
"""


class Pki:
    def __init__(self, seed: int = 1, scheme: str = "ed25519") -> None:
        self.rng = random.Random(seed)
        self.scheme = make_scheme(scheme)
        self.ca = CertificateAuthority.create("test-ca", self.scheme, self.rng)
        self.trust = TrustStore(self.scheme)
        self.trust.add_anchor(self.ca)
        broker = Identity("broker", RoleKind.GatewayOperator)
        sk, pk = self.scheme.keypair(self.rng)
        self.issuer = TokenIssuer(broker, self.scheme, sk, pk)
        self.issuers = {broker: pk}

    def cred(self, name: str, role: RoleKind):
        return self.ca.issue(Identity(name, role), self.rng)

    def auth_result(self, cred, now: int = 0) -> AuthResult:
        return AuthResult(cred.identity, cred.fingerprint, Method.Cert, now)


@pytest.fixture
def pki() -> Pki:
    return Pki()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for name in sorted(results, key=lambda n: int(n[1:])):
            terminalreporter.write_line(results[name])
