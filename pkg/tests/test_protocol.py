"""Tests for the round message types and communication accounting."""

import numpy as np
import pytest

from fedlite import quantizer as pq
from fedlite.protocol import (
    CSV_HEADER,
    AccountingMismatchError,
    ClientExchange,
    ClientSyncMsg,
    CommLedger,
    CostSummary,
    DownlinkGradientMsg,
    LedgerRecord,
    RawActivations,
    UplinkActivationMsg,
    account_round,
    compare_costs,
)


def make_exchange(client_id=0, dim=8, batch=5, quantize=False, seed=0,
                  client_params=11):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(dim, batch))
    labels = rng.integers(0, 3, size=batch)
    if quantize:
        cfg = pq.QuantizerConfig(subvectors=4, groups=2, centroids=3)
        payload = pq.encode(z, cfg, seed=seed, labels=labels)
    else:
        payload = RawActivations(z)
    return ClientExchange(
        client_id=client_id,
        uplink=UplinkActivationMsg(payload, labels),
        downlink=DownlinkGradientMsg(rng.normal(size=(dim, batch))),
        sync=ClientSyncMsg(rng.normal(size=client_params)),
    )


def test_raw_uplink_bits_match_the_float_accounting():
    # flagship sizes: 9216-wide cut, batch 20, client half of 18816 params
    ex = make_exchange(dim=16, batch=20, client_params=18816)
    ex.uplink.payload.values = np.zeros((9216, 20))
    ex.downlink.grad = np.zeros((9216, 20))
    records = account_round(3, [ex])
    assert len(records) == 1
    rec = records[0]
    assert rec.uplink_act_bits == 64 * 9216 * 20 == 11796480
    assert rec.uplink_sync_bits == 64 * 18816
    assert rec.uplink_act_bits + rec.uplink_sync_bits == 64 * (18816 + 20 * 9216)
    assert rec.downlink_bits == 64 * 9216 * 20 + 64 * 18816
    assert rec.round_index == 3 and rec.client_id == 0


def test_quantized_uplink_bits_match_the_serializer():
    ex = make_exchange(quantize=True)
    records = account_round(0, [ex])
    cfg = ex.uplink.payload.config
    bits = pq.message_bits(cfg, 8, 5)
    assert records[0].uplink_act_bits == bits.wire
    assert ex.uplink.ideal_bits() == bits.ideal
    assert ex.uplink.quantized


def test_flagship_quantizer_config_ideal_bits():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(9216, 20))
    cfg = pq.QuantizerConfig(subvectors=1152, groups=1, centroids=2)
    msg = pq.encode(z, cfg, seed=0, labels=np.zeros(20, dtype=int))
    up = UplinkActivationMsg(msg, np.zeros(20, dtype=int))
    assert up.ideal_bits() == 24064.0
    raw_bits = 64 * 9216 * 20
    assert abs(raw_bits / up.ideal_bits() - 490.2) < 1.0


def test_empty_round_is_an_empty_delta():
    assert account_round(0, []) == []
    ledger = CommLedger()
    ledger.extend(account_round(0, []))
    assert ledger.totals() == {"uplink_act_bits": 0, "uplink_sync_bits": 0,
                               "downlink_bits": 0}


def test_ledger_totals_are_additive():
    ledger = CommLedger()
    rng = np.random.default_rng(7)
    for rnd in range(4):
        n_clients = int(rng.integers(0, 4))
        exchanges = [make_exchange(client_id=c, quantize=bool(rng.integers(2)),
                                   seed=rnd * 10 + c)
                     for c in range(n_clients)]
        ledger.extend(account_round(rnd, exchanges))
    assert ledger.total_uplink_bits == sum(
        r.uplink_act_bits + r.uplink_sync_bits for r in ledger.records)
    assert ledger.total_downlink_bits == sum(
        r.downlink_bits for r in ledger.records)
    for key, total in ledger.totals().items():
        assert total == sum(getattr(r, key) for r in ledger.records)
    floats = ledger.float_equivalents(64)
    assert floats["downlink_bits"] == ledger.total_downlink_bits / 64


def test_ledger_csv_format(tmp_path):
    ledger = CommLedger()
    ledger.append(LedgerRecord(0, 2, 100, 50, 150))
    ledger.append(LedgerRecord(1, 0, 7, 8, 9))
    path = tmp_path / "ledger.csv"
    ledger.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == CSV_HEADER == (
        "round,client,uplink_act_bits,uplink_sync_bits,downlink_bits")
    assert lines[1] == "0,2,100,50,150"
    assert lines[2] == "1,0,7,8,9"
    assert ledger.to_csv_string().splitlines() == lines


def test_account_round_flags_serializer_formula_disagreement(monkeypatch):
    ex = make_exchange(quantize=True)
    real = pq.serialize
    monkeypatch.setattr("fedlite.protocol.pq.serialize",
                        lambda msg: real(msg) + b"\x00")
    with pytest.raises(AccountingMismatchError):
        account_round(0, [ex])


def test_account_round_rejects_mismatched_batches():
    ex = make_exchange()
    ex.downlink = DownlinkGradientMsg(np.zeros((8, 4)))
    with pytest.raises(ValueError):
        account_round(0, [ex])


def test_message_validation():
    with pytest.raises(ValueError):
        UplinkActivationMsg(RawActivations(np.zeros((4, 3))), np.zeros(2))
    with pytest.raises(ValueError):
        RawActivations(np.zeros(4))
    with pytest.raises(ValueError):
        DownlinkGradientMsg(np.zeros(4))
    with pytest.raises(ValueError):
        ClientSyncMsg(np.zeros((2, 2)))


def test_compare_costs_reproduces_the_table():
    total_params = 18816 + 1187774
    fedavg = compare_costs("fedavg", total_params, 18816, batch=20, cut_dim=9216)
    assert fedavg.comm_floats == 1206590
    assert fedavg.comm_bits == 1206590 * 64
    assert fedavg.total_compute == "O(batch * total_params)"

    split = compare_costs("splitfed", total_params, 18816, batch=20, cut_dim=9216)
    assert split.comm_floats == 20 * 9216 + 18816 == 203136
    assert split.client_compute == "O(batch * client_params / local_steps)"
    # the split exchange undercuts moving the whole model
    assert split.comm_floats < fedavg.comm_floats

    stepped = compare_costs("splitfed", total_params, 18816, batch=20,
                            cut_dim=9216, local_steps=4)
    assert stepped.comm_floats == 20 * 9216 / 4 + 18816

    degenerate = compare_costs("splitfed", total_params, 18816, batch=20,
                               cut_dim=0)
    assert degenerate.comm_floats == 18816

    with pytest.raises(ValueError):
        compare_costs("gossip", 10, 5, 2, 2)
    with pytest.raises(ValueError):
        compare_costs("fedavg", 0, 5, 2, 2)
