import hashlib
import json
import socket
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from gansharing import audit, gan, phantom
from gansharing.classifier import ClassifierHyper, ModelSpec, predict, train_classifier
from gansharing.federation import (CentreNode, CentreServer, ExperimentSpec, IntegrityError, PackageError,
                                   ParseError, RemoteError, VersionError, Workspace, bundled_config,
                                   classifier_from_package, classifier_to_bytes, generator_to_bytes, grid_specs,
                                   list_models, load_generator, package_read, package_write, pull, pull_bytes,
                                   reaggregate, run_experiment, run_grid, subsample)
from gansharing.federation import protocol, report
from gansharing.metrics import METRICS, dumps
from gansharing.patchlab import HEALTHY, NON_HEALTHY, PatchRecord

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


def _manifest(model_id="m1", **extra):
    base = dict(model_id=model_id, centre_id="B", variant="dcgan", architecture=[], config_digest="d",
                epochs=1, checkpoint_epochs=[1], created_at="1970-01-01T00:00:00Z")
    base.update(extra)
    return base


def _tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {"w": rng.normal(size=(3, 2, 2)).astype(np.float32), "b": rng.normal(size=4),
            "scalar": np.array(1.5, dtype=np.float32)}


# -- container -------------------------------------------------------------------------------
def test_round_trip_is_bit_exact():
    t = _tensors()
    pkg = package_read(package_write("generator", t, _manifest()))
    assert pkg.kind == "generator" and list(pkg.tensors) == list(t)
    for k in t:
        assert pkg.tensors[k].dtype == t[k].dtype
        assert pkg.tensors[k].tobytes() == t[k].tobytes()


def test_layout_by_hand():
    data = package_write("classifier", {"x": np.array([1.0], dtype=np.float32)}, _manifest())
    magic, version, kind, count, mlen = struct.unpack_from("<4sHBII", data)
    assert (magic, version, kind, count) == (b"MGPK", 1, 1, 1)
    manifest = json.loads(data[15:15 + mlen])
    section = data[15 + mlen:-32]
    assert section == struct.pack("<H", 1) + b"x" + struct.pack("<BBI", 1, 1, 1) + struct.pack("<f", 1.0)
    assert manifest["content_hash"] == hashlib.sha256(section).hexdigest()
    assert data[-32:] == hashlib.sha256(data[:-32]).digest()


def test_empty_tensor_section_hash():
    pkg = package_read(package_write("generator", {}, _manifest()))
    assert pkg.manifest["content_hash"] == EMPTY_SHA256 == hashlib.sha256(b"").hexdigest()


def test_every_single_byte_corruption_is_detected():
    data = package_write("generator", {"w": np.arange(6, dtype=np.float32)}, _manifest())
    for i in range(len(data)):
        for flip in (0x01, 0x10, 0x80, 0xFF):
            bad = bytearray(data)
            bad[i] ^= flip
            with pytest.raises(PackageError):
                package_read(bytes(bad))


def test_payload_corruption_names_the_hash():
    data = bytearray(package_write("generator", {"w": np.arange(6, dtype=np.float32)}, _manifest()))
    data[-40] ^= 0xFF
    with pytest.raises(IntegrityError) as err:
        package_read(bytes(data))
    assert err.value.which == "file_hash"


def test_content_hash_checked_even_with_a_valid_file_hash():
    data = package_write("generator", {"w": np.arange(6, dtype=np.float32)}, _manifest())
    body = bytearray(data[:-32])
    body[-1] ^= 0xFF  # last payload byte
    forged = bytes(body) + hashlib.sha256(bytes(body)).digest()
    with pytest.raises(IntegrityError) as err:
        package_read(forged)
    assert err.value.which == "content_hash"


def test_truncation_reports_offset():
    data = package_write("generator", _tensors(), _manifest())
    for n in range(len(data)):
        with pytest.raises(ParseError) as err:
            package_read(data[:n])
        assert 0 <= err.value.offset <= n


def test_unknown_version_is_rejected():
    data = bytearray(package_write("generator", {}, _manifest()))
    struct.pack_into("<H", data, 4, 2)
    with pytest.raises(VersionError):
        package_read(bytes(data))


def test_writer_validation():
    with pytest.raises(PackageError, match="manifest missing"):
        package_write("generator", {}, {"model_id": "x"})
    with pytest.raises(PackageError):
        package_write("generator", {"w": np.array([np.nan], dtype=np.float32)}, _manifest())
    with pytest.raises(PackageError):
        package_write("generator", {"w": np.arange(3)}, _manifest())
    with pytest.raises(PackageError):
        package_write("optimizer", {}, _manifest())


@pytest.fixture(scope="module")
def tiny_gan():
    rng = np.random.default_rng(0)
    lesions = [PatchRecord(pixels=rng.random((8, 8)).astype(np.float32), label=NON_HEALTHY) for _ in range(8)]
    cfg = gan.GanConfig(image_side=8, base_channels=2, epochs=4, checkpoint_start=2, checkpoint_every=2,
                        batch_size=4)
    return gan.train_gan(cfg, lesions, seed=0, centre_id="B", gan_id="B-tiny")


def test_generator_package_reproduces_samples(tiny_gan):
    back = load_generator(generator_to_bytes(tiny_gan, created_at="1970-01-01T00:00:00Z"))
    assert back.checkpoint_list == tiny_gan.checkpoint_list
    a = gan.sample_synthetic(tiny_gan, 6, seed=1)
    b = gan.sample_synthetic(back, 6, seed=1)
    assert [r.pixels.tobytes() for r in a] == [r.pixels.tobytes() for r in b]
    assert [r.provenance for r in a] == [r.provenance for r in b]


def test_generator_package_is_deterministic(tiny_gan):
    a = generator_to_bytes(tiny_gan, created_at="1970-01-01T00:00:00Z")
    assert a == generator_to_bytes(tiny_gan, created_at="1970-01-01T00:00:00Z")
    manifest = package_read(a).manifest
    assert manifest["checkpoint_epochs"] == [2, 4] and manifest["model_id"] == "B-tiny"


def test_created_at_honours_source_date_epoch(monkeypatch, tiny_gan):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    assert package_read(generator_to_bytes(tiny_gan)).manifest["created_at"] == "1970-01-02T00:00:00Z"


def test_classifier_package_round_trip():
    rng = np.random.default_rng(0)
    patches = [PatchRecord(pixels=rng.random((16, 16)).astype(np.float32), label=(HEALTHY, NON_HEALTHY)[i % 2])
               for i in range(8)]
    model = train_classifier(ModelSpec("cnn", 16), patches, patches, ClassifierHyper(epochs=1, batch_size=4))
    back = classifier_from_package(package_read(classifier_to_bytes(model, "A", "1970-01-01T00:00:00Z")))
    assert back.best_epoch == model.best_epoch
    assert predict(back, patches) == predict(model, patches)


# -- protocol ---------------------------------------------------------------------------------------
@pytest.fixture
def server(tmp_path):
    node = CentreNode("B", package_dir=tmp_path / "pk")
    for i in range(2):
        node.publish(package_write("generator", _tensors(i), _manifest(f"m{i}")))
    with CentreServer(node) as srv:
        yield node, srv


def test_list_and_pull(server):
    node, srv = server
    manifests = list_models(srv.address)
    assert [m["model_id"] for m in manifests] == ["m0", "m1"]
    assert pull_bytes(srv.address, "m1") == node.get_bytes("m1")
    assert pull(srv.address, "m0").tensors["w"].tobytes() == _tensors(0)["w"].tobytes()


def test_unknown_model_is_not_found(server):
    with pytest.raises(RemoteError) as err:
        pull(server[1].address, "nope")
    assert err.value.code == "NOT_FOUND"


def test_bad_request(server):
    with pytest.raises(RemoteError) as err:
        protocol.request(server[1].address, b"PUT x")
    assert err.value.code == "BAD_REQUEST"


def test_oversized_frame_is_rejected(tmp_path):
    node = CentreNode("B")
    with CentreServer(node, max_frame=16) as srv:
        with socket.create_connection(srv.address, timeout=10) as sock:
            sock.sendall(struct.pack("<I", 1 << 20))
            reply = protocol.recv_frame(sock)
    assert reply.startswith(b"ERR ") and json.loads(reply[4:])["code"] == "TOO_LARGE"


def test_truncated_frame_gets_malformed(server):
    with socket.create_connection(server[1].address, timeout=10) as sock:
        sock.sendall(struct.pack("<I", 100) + b"GET m0")
        sock.shutdown(socket.SHUT_WR)
        reply = protocol.recv_frame(sock)
    assert json.loads(reply[4:])["code"] == "MALFORMED"


def test_eight_concurrent_pulls_agree(server):
    node, srv = server
    with ThreadPoolExecutor(8) as pool:
        got = list(pool.map(lambda _: pull_bytes(srv.address, "m0"), range(8)))
    assert len({hashlib.sha256(g).hexdigest() for g in got}) == 1
    assert got[0] == node.get_bytes("m0")


def test_several_requests_on_one_connection(server):
    with socket.create_connection(server[1].address, timeout=10) as sock:
        for mid in ("m0", "m1", "m0"):
            protocol.send_frame(sock, b"GET " + mid.encode())
            assert protocol.recv_frame(sock)[3:] == server[0].get_bytes(mid)


def test_node_verifies_on_publish_and_reloads(tmp_path):
    node = CentreNode("B", package_dir=tmp_path)
    data = package_write("generator", _tensors(), _manifest("keep"))
    node.publish(data)
    bad = bytearray(data)
    bad[20] ^= 1
    with pytest.raises(PackageError):
        node.publish(bytes(bad))
    assert CentreNode("B", package_dir=tmp_path).get_bytes("keep") == data


# -- privacy boundary ---------------------------------------------------------------------------------
def test_reading_another_centres_corpus_is_a_violation(tmp_path):
    profile = phantom.CentreProfile("B", width=96, height=72, lesion_size_mean_px=6, lesion_size_std_px=1,
                                    patient_count=1)
    phantom.write_corpus(phantom.generate_corpus(profile, 0), tmp_path / "B")
    audit.reset()
    try:
        audit.register_owner(tmp_path / "B", "B")
        with audit.acting_as("B"):
            phantom.read_corpus(tmp_path / "B")
        assert audit.log().violations() == []
        with audit.acting_as("A"), pytest.raises(audit.PrivacyViolation):
            phantom.read_corpus(tmp_path / "B")
        assert audit.log().violations()
    finally:
        audit.reset()


# -- experiments ------------------------------------------------------------------------------------------
def test_subsample_is_stratified_and_seeded():
    recs = [PatchRecord(pixels=np.zeros((2, 2), np.float32), label=(HEALTHY, NON_HEALTHY)[i % 3 == 0],
                        image_id=str(i)) for i in range(60)]
    a = subsample(recs, 0.5, 3)
    assert [r.image_id for r in a] == [r.image_id for r in subsample(recs, 0.5, 3)]
    assert sum(r.label == NON_HEALTHY for r in a) == 10 and sum(r.label == HEALTHY for r in a) == 20
    assert subsample(recs, 1.0, 0) == recs


def test_grid_enumeration():
    specs = grid_specs()
    assert len(specs) == 56 and len({s.cell_id for s in specs}) == 56
    with pytest.raises(ValueError):
        ExperimentSpec(augmentation="both_c")


def _cell(clf, scope, frac, aug, value):
    agg = {"mean": {m: value for m in METRICS}, "std": {m: 0.01 for m in METRICS}}
    return {"cell": f"{clf}/{scope}/{round(frac * 100)}/{aug}",
            "spec": {"classifier": clf, "scope": scope, "data_fraction": frac, "augmentation": aug, "seeds": [0]},
            "aggregate": agg}


def test_best_marker_on_column_maximum():
    cells = [_cell("cnn", "all_lesions", 1.0, aug, v)
             for aug, v in (("none", 0.70), ("bcdr_dcgan", 0.80), ("both_a", 0.75))]
    text = report.render_tables(cells)
    assert "0.800(.010)*" in text and "0.700(.010)*" not in text and "0.750(.010)*" not in text
    rows = report.delimited_rows(cells)
    col = rows[0].index("f1_best")
    assert [r[col] for r in rows[1:]] == [0, 1, 0]


def test_ties_are_all_marked():
    assert report.best_rows([0.5, 0.7, 0.7, None]) == {1, 2}


def test_single_cell_table_has_one_row():
    lines = report.render_tables([_cell("swinmini", "masses_only", 0.5, "none", 0.6)]).strip().splitlines()
    body = [l for l in lines[4:] if l.strip()]
    assert len(body) == 1 and body[0].startswith("Centre A only")


@pytest.fixture(scope="module")
def smoke_grid(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    audit.reset()
    ws = Workspace(bundled_config("smoke"), root / "ws")
    ws.prepare()
    doc = run_grid(grid_specs(seeds=[0, 1]), ws, root / "out", figures=True)
    return root, ws, doc, audit.log().violations()


def test_smoke_grid_layout(smoke_grid):
    root, _, doc, _ = smoke_grid
    assert len(doc["cells"]) == 56
    out = root / "out"
    for name in ("results.json", "tables.txt", "results.csv", "results.tsv"):
        assert (out / name).stat().st_size > 0
    tables = (out / "tables.txt").read_text()
    assert tables.count("Classifier: ") == 2
    assert len((out / "results.csv").read_text().splitlines()) == 57
    assert any(p.suffix == ".png" for p in (out / "figures").iterdir())
    assert json.loads((out / "results.json").read_text()) == json.loads(dumps(doc))


def test_smoke_grid_reaggregates(smoke_grid):
    for cell in smoke_grid[2]["cells"]:
        assert reaggregate(cell) == cell["aggregate"]


def test_smoke_grid_respects_the_boundary(smoke_grid):
    _, ws, doc, violations = smoke_grid
    assert violations == []
    flagged = [c["cell"] for c in doc["cells"] if c["flags"]]
    assert flagged and all(c.endswith("real_external") for c in flagged)


def test_smoke_cell_baseline_uses_full_training_split(smoke_grid):
    _, ws, doc, _ = smoke_grid
    cell = next(c for c in doc["cells"] if c["cell"] == "cnn/all_lesions/100/none")
    train = ws.split("all_lesions").train
    expected = {HEALTHY: sum(p.label == HEALTHY for p in train), NON_HEALTHY: sum(p.label == NON_HEALTHY for p in train)}
    assert all(s["train_counts"] == expected for s in cell["per_seed"])


def test_cell_rerun_in_a_fresh_workspace_is_byte_identical(smoke_grid, tmp_path):
    _, _, doc, _ = smoke_grid
    spec = ExperimentSpec("masses_only", 0.5, "both_a", "cnn", [0, 1])
    ws = Workspace(bundled_config("smoke"), tmp_path / "ws")
    ws.prepare()
    again = run_experiment(spec, ws).to_json()
    original = next(c for c in doc["cells"] if c["cell"] == spec.cell_id)
    assert dumps(again) == dumps(original)
