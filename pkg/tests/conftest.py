import numpy as np
import pytest

from fiemf.dataset import QosMatrix, UserRegionTable

COUNTRIES = ["United States", "China", "Germany", "Brazil", "Japan", "India"]


def synthetic_qos(num_users=40, num_services=80, seed=0, missing=0.1, rank=3, countries=COUNTRIES):
    """Heavy-tailed response times with user, service, region and low-rank structure."""
    rng = np.random.default_rng(seed)
    region = rng.integers(0, len(countries), size=num_users)
    region_shift = rng.normal(0, 0.5, len(countries))
    a = rng.normal(0, 0.4, num_users) + region_shift[region]
    s = rng.normal(0, 0.8, num_services)
    X = rng.normal(0, 0.5, (num_users, rank))
    Y = rng.normal(0, 0.5, (num_services, rank))
    logt = -1.0 + a[:, None] + s[None, :] + X @ Y.T + rng.normal(0, 0.3, (num_users, num_services))
    dense = np.minimum(np.exp(logt), 19.999)
    dense[rng.random(dense.shape) < missing] = -1
    labels = tuple(countries[r] for r in region)
    return QosMatrix.from_dense(dense), UserRegionTable(labels)


def write_wsdream(directory, matrix: QosMatrix, regions: UserRegionTable):
    """Write files in the WS-DREAM layout (rtMatrix.txt, userlist.txt)."""
    rt = directory / "rtMatrix.txt"
    dense = matrix.dense(fill=-1.0)
    with open(rt, "w") as fh:
        for row in dense:
            fh.write("\t".join("-1" if v == -1 else f"{v:.3f}" for v in row) + "\n")
    users = directory / "userlist.txt"
    with open(users, "w") as fh:
        fh.write("[User ID]\t[IP Address]\t[Country]\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n")
        fh.write("=" * 60 + "\n")
        for uid, label in enumerate(regions.labels):
            fh.write(f"{uid}\t10.0.0.{uid % 250}\t{label}\t{1000 + uid}\tAS{uid}\t0.0\t0.0\n")
    return rt, users


@pytest.fixture(scope="session")
def small_data():
    return synthetic_qos()


@pytest.fixture(scope="session")
def wsdream_files(tmp_path_factory, small_data):
    directory = tmp_path_factory.mktemp("wsdream")
    return write_wsdream(directory, *small_data)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line and fail the test when the criterion is not met."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        lines.append(line)
        if not passed:
            pytest.fail(line, pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
