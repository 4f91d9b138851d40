"""Event-driven training protocols: FL, split learning, nested FedSplit.

Each runner drives real numpy training through the event loop: every
transmission and computation is scheduled, charged for energy, and debited
against device batteries. Model updates for one global iteration are staged
and committed together at the iteration's end, so a discarded iteration
leaves no partial update behind.

Loss bookkeeping: the recorded loss of an iteration is the batch loss
*before* that iteration's step (training loss). Accuracy comes from a
held-out evaluation at the loss-owning node, charged as compute there.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import costs, mlp
from .data import DataBundle
from .engine import Engine, EventKind
from .errors import (
    AllClientsDropped,
    MissingD2dLink,
    NestedServerMismatch,
    ScenarioSchemaError,
    SessionAborted,
)
from .radio import AccessScheme, RadioEnv, draw_channel_gain, tx_cost
from .topology import NetworkTopology

# payload vocabulary; every scheduled transmission names one of these
PAYLOAD_KINDS = ("model", "delta", "client_part", "smashed+labels", "smashed",
                 "smashed_grad", "labels")


@dataclass
class TrainingConfig:
    lr: float
    batch_size: int
    cycles_per_mac: float = 1.0
    eval_every: int = 1  # global iterations between held-out evals; 0 disables


@dataclass
class FlSession:
    server: str
    clients: list[str]
    local_iterations: int
    global_rounds: int
    model: mlp.MlpModel
    scheme: AccessScheme
    config: TrainingConfig
    data: DataBundle
    dropout_slope: float = 0.0
    round_deadline: float = float("inf")

    def __post_init__(self):
        if not self.clients:
            raise ScenarioSchemaError("an FL session needs at least one client")
        if self.local_iterations < 1 or self.global_rounds < 1:
            raise ScenarioSchemaError("iteration counts must be >= 1")


@dataclass
class SlSession:
    server: str
    clients: list[str]
    variant: str  # "homogeneous" | "heterogeneous"
    iterations: int
    model: mlp.MlpModel
    scheme: AccessScheme
    config: TrainingConfig
    data: DataBundle
    cut_index: int | None = None       # homogeneous: shared client/server cut
    boundaries: tuple[int, ...] = ()   # heterogeneous: one segment end per client
    relay: str = "via_server"          # "via_server" | "d2d"
    dropout_slope: float = 0.0

    def __post_init__(self):
        if not self.clients:
            raise ScenarioSchemaError("an SL session needs at least one client")
        num_layers = self.model.num_layers
        if self.variant == "homogeneous":
            if self.cut_index is None or not 1 <= self.cut_index <= num_layers - 1:
                raise ScenarioSchemaError(
                    f"cut_index must be in [1, {num_layers - 1}], got {self.cut_index!r}")
        elif self.variant == "heterogeneous":
            if len(self.boundaries) != len(self.clients):
                raise ScenarioSchemaError(
                    f"{len(self.clients)} clients need {len(self.clients)} segment "
                    f"boundaries, got {self.boundaries!r}")
            edges = (0, *self.boundaries)
            if any(a >= b for a, b in zip(edges, edges[1:])) \
                    or self.boundaries[-1] >= num_layers:
                raise ScenarioSchemaError(
                    f"boundaries must be strictly increasing in (0, {num_layers}), "
                    f"got {self.boundaries!r}")
        else:
            raise ScenarioSchemaError(f"unknown SL variant {self.variant!r}")
        if self.relay not in ("via_server", "d2d"):
            raise ScenarioSchemaError(f"unknown relay mode {self.relay!r}")


@dataclass
class IterationRecord:
    index: int
    wall_latency: float
    compute_energy: dict[str, float]
    tx_energy: dict[str, float]
    rx_energy: dict[str, float]
    bytes_up: int
    bytes_down: int
    loss: float
    accuracy: float | None
    dropouts: list[str]

    def total(self, which: str) -> float:
        return sum(getattr(self, which + "_energy").values())


CSV_COLUMNS = ("protocol", "iteration", "wall_latency_s", "total_compute_J",
               "total_tx_J", "total_rx_J", "bytes_up", "bytes_down", "loss",
               "accuracy", "dropouts")


@dataclass
class MetricsTrace:
    protocol: str
    records: list[IterationRecord] = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0
    status: str = "completed"
    final_model: mlp.MlpModel | None = None

    def csv_rows(self) -> list[str]:
        rows = []
        for r in self.records:
            acc = "" if r.accuracy is None else repr(r.accuracy)
            rows.append(",".join([
                self.protocol, str(r.index), repr(r.wall_latency),
                repr(r.total("compute")), repr(r.total("tx")), repr(r.total("rx")),
                str(r.bytes_up), str(r.bytes_down), repr(r.loss), acc,
                ";".join(r.dropouts)]))
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            if self.config_hash:
                fh.write(f"# config_hash={self.config_hash} seed={self.seed}\n")
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for row in self.csv_rows():
                fh.write(row + "\n")

    def summary(self) -> dict:
        last_acc = next((r.accuracy for r in reversed(self.records)
                         if r.accuracy is not None), None)
        return {
            "protocol": self.protocol,
            "status": self.status,
            "iterations": len(self.records),
            "wall_latency_s": sum(r.wall_latency for r in self.records),
            "total_compute_J": sum(r.total("compute") for r in self.records),
            "total_tx_J": sum(r.total("tx") for r in self.records),
            "total_rx_J": sum(r.total("rx") for r in self.records),
            "bytes_up": sum(r.bytes_up for r in self.records),
            "bytes_down": sum(r.bytes_down for r in self.records),
            "final_loss": self.records[-1].loss if self.records else None,
            "final_accuracy": last_acc,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=2)
            fh.write("\n")


# ====================================================================== #

class _RunnerBase:
    """Transmission/computation legs shared by all protocol runners.

    Every leg is scheduled on the engine and calls `done()` (or `fail()`)
    from inside the completion event, after charging energy and debiting
    batteries. Battery sufficiency is checked when a leg starts: a device
    that cannot afford a leg refuses it and drops out at the current clock,
    spending nothing.
    """

    def __init__(self, protocol: str, topo: NetworkTopology, radio_env: RadioEnv,
                 eng: Engine, scheme: AccessScheme, config: TrainingConfig,
                 dropout_slope: float):
        self.protocol = protocol
        self.topo = topo
        self.radio = radio_env
        self.eng = eng
        self.scheme = scheme
        self.config = config
        self.dropout_slope = dropout_slope
        self.bytes_up = 0
        self.bytes_down = 0
        self._block_slot: dict[str, int] = {}
        self._cluster_rate_cache: dict[tuple, dict[str, float]] = {}

    # ---- node parameters ----

    def _compute_params(self, node: str) -> tuple[float, float]:
        if node in self.topo.servers:
            s = self.topo.servers[node]
            return s.compute_rate, s.energy_per_cycle
        u = self.topo.ues[node]
        return u.compute_rate, u.energy_per_cycle

    def _ap_of(self, ue_id: str) -> str:
        return self.topo.ues[ue_id].attached_ap

    def assign_block_slots(self, clients: list[str]) -> None:
        """Pin each client to a stable uplink block slot (list order), so block
        choice never depends on event timing."""
        for c in clients:
            if c not in self._block_slot:
                self._block_slot[c] = len(self._block_slot)

    def _block_slot_of(self, ue_id: str) -> int:
        if ue_id not in self._block_slot:
            self._block_slot[ue_id] = len(self._block_slot)
        return self._block_slot[ue_id]

    # ---- failure plumbing ----

    def _refuse(self, node: str, reason: str, fail) -> None:
        """Node cannot run a leg: drop it at the current clock, then `fail`."""
        self.eng.mark_dropped(node, reason, callback=fail)

    def _battery_ok(self, node: str, joules: float, fail) -> bool:
        if node in self.eng.dropped:
            self._refuse(node, "already dropped", fail)
            return False
        if self.eng.can_afford(node, joules):
            return True
        self._refuse(node, "insufficient battery", fail)
        return False

    def _outage(self, ue_id: str, context: str, fail) -> bool:
        """Per-transmission channel outage draw; static channels never fail
        and consume no randomness."""
        ue = self.topo.ues[ue_id]
        if self.dropout_slope <= 0.0 or ue.channel_variance <= 0.0:
            return False
        p = min(1.0, self.dropout_slope * ue.channel_variance)
        draw = self.eng.rng.stream(f"drop:{ue_id}:{context}").uniform()
        if draw >= p:
            return False
        self._refuse(ue_id, "channel outage", fail)
        return True

    # ---- legs ----

    def leg_compute(self, node: str, macs: float, what: str, done, fail=None) -> None:
        rate, epc = self._compute_params(node)
        latency, energy = costs.compute_cost(macs, self.config.cycles_per_mac, rate, epc)
        if node in self.topo.ues and not self._battery_ok(node, energy, fail or done):
            return
        def finish():
            self.eng.charge(node, "compute", energy)
            self.eng.debit_battery(node, energy)
            done()
        self.eng.schedule_after(latency, EventKind.COMPUTE_DONE, finish,
                                node=node, detail=what)

    def _uplink_rate_power(self, ue_id: str, context: str) -> tuple[float, float, list, str | None]:
        """(rate, tx_power, blocks, shared_tag) for one uplink transmission."""
        ue = self.topo.ues[ue_id]
        ap = ue.attached_ap
        cluster = self.radio.cluster_of(ue_id)
        if cluster is not None and self.scheme.kind.noma:
            key = (cluster.member_ids(), context.split(":")[0])
            rates = self._cluster_rate_cache.get(key)
            if rates is None:
                gains = {m: draw_channel_gain(self.topo.ues[m],
                                              self.eng.rng.stream(f"gain:{m}:{key[1]}"))
                         for m in cluster.member_ids()}
                rates = self.radio.cluster_rates(cluster, gains)
                self._cluster_rate_cache[key] = rates
            tag = "cluster:" + "+".join(cluster.member_ids())
            return rates[ue_id], cluster.power_of(ue_id), list(cluster.blocks), tag
        gain = draw_channel_gain(ue, self.eng.rng.stream(f"gain:{ue_id}:{context}"))
        block = self.radio.block_for(ap, self._block_slot_of(ue_id))
        rate = self.radio.oma_uplink_rate(block, ue.tx_power, gain)
        return rate, ue.tx_power, [block], None

    def leg_radio_up(self, ue_id: str, bits: int, payload: str, context: str,
                     done, fail) -> None:
        """One uplink transmission UE -> its access point."""
        if self._outage(ue_id, context, fail):
            return
        rate, power, blocks, tag = self._uplink_rate_power(ue_id, context)
        latency, energy = tx_cost(bits, rate, power, self.scheme)
        if not self._battery_ok(ue_id, energy, fail):
            return
        ap = self._ap_of(ue_id)
        start = self.eng.clock
        for block in blocks:
            start = max(start, self.eng.blocks.reserve(
                ap, block.index, self.eng.clock, latency, owner=ue_id, shared_tag=tag))
        def finish():
            self.eng.charge(ue_id, "tx", energy)
            self.eng.debit_battery(ue_id, energy)
            rx = self.radio.rx_energy_per_bit * bits
            if rx > 0:
                self.eng.charge(ap, "rx", rx)
            self.bytes_up += bits // 8
            done()
        self.eng.schedule(start + latency, EventKind.TX_DONE, finish,
                          node=ue_id, detail=f"ul:{payload}")

    def leg_radio_down(self, ue_id: str, bits: int, payload: str, done, fail) -> None:
        """One downlink transmission: access point -> UE at the fixed rate."""
        ap = self._ap_of(ue_id)
        latency = bits / self.radio.downlink_rate
        rx = self.radio.rx_energy_per_bit * bits
        if not self._battery_ok(ue_id, rx, fail):
            return
        def finish():
            tx = self.radio.downlink_energy_per_bit * bits
            if tx > 0:
                self.eng.charge(ap, "tx", tx)
            if rx > 0:
                self.eng.charge(ue_id, "rx", rx)
                self.eng.debit_battery(ue_id, rx)
            self.bytes_down += bits // 8
            done()
        self.eng.schedule_after(latency, EventKind.TX_DONE, finish,
                                node=ue_id, detail=f"dl:{payload}")

    def leg_backhaul(self, src: str, dst: str, bits: int, payload: str, done) -> None:
        """Server-to-server hop over a configured wired pipe."""
        link = self.topo.link_between(src, dst)
        latency, energy = costs.link_cost(bits, link)
        def finish():
            if energy > 0:
                self.eng.charge(src, "tx", energy)
            rx = self.radio.rx_energy_per_bit * bits
            if rx > 0:
                self.eng.charge(dst, "rx", rx)
            done()
        self.eng.schedule_after(latency, EventKind.TX_DONE, finish,
                                node=src, detail=f"bh:{payload}")

    def leg_d2d(self, src: str, dst: str, bits: int, payload: str, done, fail) -> None:
        """Direct device-to-device hop; no access delay, no radio scheduler."""
        link = self.topo.d2d_link(src, dst)
        if link is None:
            raise MissingD2dLink(f"no D2D link between {src!r} and {dst!r}")
        latency = bits / link.rate
        tx = bits * link.energy_per_bit
        rx = self.radio.rx_energy_per_bit * bits
        if not self._battery_ok(src, tx, fail):
            return
        if not self._battery_ok(dst, rx, fail):
            return
        def finish():
            if tx > 0:
                self.eng.charge(src, "tx", tx)
            self.eng.debit_battery(src, tx)
            if rx > 0:
                self.eng.charge(dst, "rx", rx)
                self.eng.debit_battery(dst, rx)
            done()
        self.eng.schedule_after(latency, EventKind.TX_DONE, finish,
                                node=src, detail=f"d2d:{payload}")

    def uplink_path(self, ue_id: str, server: str, bits: int, payload: str,
                    context: str, done, fail) -> None:
        """UE -> server: radio uplink plus a backhaul hop when the server is
        not the UE's own access point."""
        ap = self._ap_of(ue_id)
        if server == ap:
            self.leg_radio_up(ue_id, bits, payload, context, done, fail)
        else:
            self.leg_radio_up(ue_id, bits, payload, context,
                              lambda: self.leg_backhaul(ap, server, bits, payload, done),
                              fail)

    def downlink_path(self, server: str, ue_id: str, bits: int, payload: str,
                      done, fail) -> None:
        ap = self._ap_of(ue_id)
        if server == ap:
            self.leg_radio_down(ue_id, bits, payload, done, fail)
        else:
            self.leg_backhaul(server, ap, bits, payload,
                              lambda: self.leg_radio_down(ue_id, bits, payload, done, fail))

    # ---- metrics plumbing ----

    def _snapshot(self) -> dict:
        return copy.deepcopy(self.eng.energy_ledger)

    def _category_diff(self, before: dict, category: str) -> dict[str, float]:
        out = {}
        for node, cats in self.eng.energy_ledger.items():
            delta = cats.get(category, 0.0) - before.get(node, {}).get(category, 0.0)
            if delta > 0:
                out[node] = delta
        return out

    def make_record(self, index: int, start_time: float, before: dict, loss: float,
                    accuracy: float | None, dropouts: list[str],
                    bytes_before: tuple[int, int]) -> IterationRecord:
        return IterationRecord(
            index=index,
            wall_latency=self.eng.clock - start_time,
            compute_energy=self._category_diff(before, "compute"),
            tx_energy=self._category_diff(before, "tx"),
            rx_energy=self._category_diff(before, "rx"),
            bytes_up=self.bytes_up - bytes_before[0],
            bytes_down=self.bytes_down - bytes_before[1],
            loss=loss,
            accuracy=accuracy,
            dropouts=dropouts,
        )

    def maybe_eval(self, owner: str, model: mlp.MlpModel, data: DataBundle,
                   global_iter: int, done) -> None:
        """Held-out evaluation at the loss owner, charged as compute there."""
        every = self.config.eval_every
        if every <= 0 or (global_iter + 1) % every != 0:
            done(None)
            return
        macs = costs.forward_macs(model.widths, data.test_x.shape[0])
        result = {}
        def finish():
            done(result["acc"])
        def run_eval():
            _, acc = mlp.evaluate(model, data.test_x, data.test_labels)
            result["acc"] = acc
            finish()
        self.leg_compute(owner, macs, "eval", run_eval)


def _abort(exc: SessionAborted, trace: MetricsTrace) -> SessionAborted:
    trace.status = f"aborted: {exc.reason}"
    exc.trace = trace
    return exc


# ====================================================================== #
#                              federated                                 #
# ====================================================================== #

class _FlRunner(_RunnerBase):
    def __init__(self, session: FlSession, topo, radio_env, eng,
                 protocol_name: str = "fl"):
        super().__init__(protocol_name, topo, radio_env, eng, session.scheme,
                         session.config, session.dropout_slope)
        self.session = session
        self.trace = MetricsTrace(protocol=protocol_name)
        self.global_model = session.model
        self.busy_until: dict[str, float] = {}
        self.assign_block_slots(session.clients)

    # one client's whole round: download, train locally, upload the delta
    def _client_round(self, client: str, rnd: int, arrive, fail) -> None:
        sess = self.session
        bits = self.global_model.payload_bits
        ctx = f"fl{rnd}"

        def after_download():
            staged = self._local_training(client, rnd)
            self.leg_compute(client, staged["macs"], f"local:r{rnd}",
                             lambda: after_compute(staged), fail)

        def after_compute(staged):
            self.uplink_path(client, sess.server, bits, "delta", f"{ctx}:{client}:ul",
                             lambda: arrive(client, staged), fail)

        self.downlink_path(sess.server, client, bits, "model", after_download, fail)

    def _local_training(self, client: str, rnd: int) -> dict:
        """The actual numpy training a client performs this round."""
        sess = self.session
        shard = sess.data.shard_of(client)
        model = self.global_model
        losses = []
        for it in range(sess.local_iterations):
            x, labels = shard.batch(rnd * sess.local_iterations + it,
                                    self.config.batch_size)
            _, cache = mlp.forward(model, x)
            losses.append(mlp.batch_loss(model, cache, labels))
            grads = mlp.backward(model, cache, labels)
            model = mlp.sgd_step(model, grads, self.config.lr)
        delta = mlp.model_delta(model, self.global_model, sample_count=shard.size)
        macs = sess.local_iterations * costs.training_macs(
            model.widths, self.config.batch_size)
        return {"delta": delta, "losses": losses, "macs": macs, "n": shard.size}

    def delta_sample_count(self, client: str) -> int:
        return self.session.data.shard_of(client).size

    def _begin_round(self, rnd: int) -> None:
        sess = self.session
        if rnd >= sess.global_rounds:
            return
        participants = [c for c in sess.clients if c not in self.eng.dropped]
        if not participants:
            raise AllClientsDropped(f"round {rnd}: no clients left")
        state = {
            "pending": set(participants),
            "arrivals": [],   # (client, staged)
            "dropouts": [],
            "start": self.eng.clock,
            "before": self._snapshot(),
            "bytes": (self.bytes_up, self.bytes_down),
            "closed": False,
        }

        def arrive(client, staged):
            self.busy_until[client] = self.eng.clock
            if state["closed"]:
                return  # past the round deadline; late delta discarded
            if self.eng.clock > state["start"] + sess.round_deadline:
                state["pending"].discard(client)
                self._maybe_close(state, rnd)
                return
            state["arrivals"].append((client, staged))
            state["pending"].discard(client)
            self._maybe_close(state, rnd)

        def fail():
            # invoked from the dropout event of whichever client just died
            for c in list(state["pending"]):
                if c in self.eng.dropped:
                    state["pending"].discard(c)
                    state["dropouts"].append(c)
            self._maybe_close(state, rnd)

        for client in participants:
            ready = max(self.eng.clock, self.busy_until.get(client, 0.0))
            self.eng.schedule(ready, EventKind.ROUND_BOUNDARY,
                              (lambda c=client: self._client_round(c, rnd, arrive, fail)),
                              node=client, detail=f"round {rnd} start")
        if sess.round_deadline != float("inf"):
            self.eng.schedule(state["start"] + sess.round_deadline,
                              EventKind.ROUND_BOUNDARY,
                              lambda: self._maybe_close(state, rnd, deadline=True),
                              node=sess.server, detail=f"round {rnd} deadline")

    def _maybe_close(self, state, rnd, deadline=False) -> None:
        if state["closed"]:
            return
        if state["pending"] and not deadline:
            return
        state["closed"] = True
        if not state["arrivals"]:
            raise AllClientsDropped(f"round {rnd}: zero surviving uploads")
        self._aggregate(state, rnd)

    def _aggregate(self, state, rnd) -> None:
        sess = self.session
        deltas = [staged["delta"] for _, staged in state["arrivals"]]
        macs = costs.aggregation_macs(len(deltas), self.global_model.param_count)

        def after_agg():
            merged = mlp.fed_avg(deltas)
            self.global_model = mlp.apply_delta(self.global_model, merged)
            self.maybe_eval(sess.server, self.global_model, sess.data, rnd,
                            lambda acc: close_round(acc))

        def close_round(accuracy):
            total_n = sum(staged["n"] for _, staged in state["arrivals"])
            loss = sum(staged["n"] * float(np.mean(staged["losses"]))
                       for _, staged in state["arrivals"]) / total_n
            self.trace.records.append(self.make_record(
                rnd, state["start"], state["before"], loss, accuracy,
                state["dropouts"], state["bytes"]))
            self.eng.schedule_after(0.0, EventKind.ROUND_BOUNDARY,
                                    lambda: self._begin_round(rnd + 1),
                                    node=sess.server, detail=f"round {rnd} done")

        self.leg_compute(sess.server, macs, f"aggregate:r{rnd}", after_agg)

    def run(self) -> MetricsTrace:
        self.eng.schedule(self.eng.clock, EventKind.ROUND_BOUNDARY,
                          lambda: self._begin_round(0),
                          node=self.session.server, detail="session start")
        try:
            self.eng.run()
        except SessionAborted as exc:
            self.trace.final_model = self.global_model
            raise _abort(exc, self.trace)
        self.trace.final_model = self.global_model
        return self.trace


def run_fl(session: FlSession, topo: NetworkTopology, radio_env: RadioEnv,
           eng: Engine) -> MetricsTrace:
    return _FlRunner(session, topo, radio_env, eng).run()


# ====================================================================== #
#                          homogeneous split                             #
# ====================================================================== #

class _SlHomoRunner(_RunnerBase):
    """Sequential split learning: one active client per iteration; the
    client-side parameters hop to the next client between iterations,
    directly over D2D when a link exists, otherwise via the server."""

    def __init__(self, session: SlSession, topo, radio_env, eng,
                 protocol_name: str = "sl_homogeneous",
                 transport_override=None):
        super().__init__(protocol_name, topo, radio_env, eng, session.scheme,
                         session.config, session.dropout_slope)
        self.session = session
        self.trace = MetricsTrace(protocol=protocol_name)
        self.model = session.model
        self.cut = session.cut_index
        self.holder: str | None = None  # who physically has the client part
        self.consecutive_failures = 0
        self.nested_transport = transport_override  # D2D hub mode (FedSplit)
        widths = self.model.widths
        self.client_part_bits = costs.model_bits(widths[:self.cut + 1])
        self.assign_block_slots(session.clients)

    # transport selection: in nested mode every hop is a D2D hop to/from the
    # master; otherwise radio uplink/downlink to the AP-side server
    def _up(self, ue, bits, payload, ctx, done, fail):
        if self.nested_transport:
            self.leg_d2d(ue, self.session.server, bits, payload, done, fail)
        else:
            self.uplink_path(ue, self.session.server, bits, payload, ctx, done, fail)

    def _down(self, ue, bits, payload, done, fail):
        if self.nested_transport:
            self.leg_d2d(self.session.server, ue, bits, payload, done, fail)
        else:
            self.downlink_path(self.session.server, ue, bits, payload, done, fail)

    def _alive_clients(self) -> list[str]:
        return [c for c in self.session.clients if c not in self.eng.dropped]

    def _client_for(self, iteration: int) -> str:
        alive = self._alive_clients()
        if not alive:
            raise AllClientsDropped(f"iteration {iteration}: no clients left")
        return alive[iteration % len(alive)]

    def _begin_iteration(self, iteration: int) -> None:
        sess = self.session
        if iteration >= sess.iterations:
            return
        active = self._client_for(iteration)
        state = {
            "start": self.eng.clock,
            "before": self._snapshot(),
            "bytes": (self.bytes_up, self.bytes_down),
            "it": iteration,
            "client": active,
            "drops": [],
        }
        fail = lambda: self._iteration_failed(state)
        self._deliver_client_part(active, state, fail)

    def _deliver_client_part(self, client: str, state, fail) -> None:
        bits = self.client_part_bits
        ctx = f"slh{state['it']}"
        done = lambda: self._client_forward(client, state, fail)
        if self.holder is None or self.holder == client:
            # first iteration seeds the part from the server; repeats keep it
            if self.holder is None:
                self._down(client, bits, "client_part", done, fail)
            else:
                done()
            return
        prev = self.holder
        if prev in self.eng.dropped:
            # committed state is recovered from the server's copy
            self._down(client, bits, "client_part", done, fail)
        elif self.topo.d2d_link(prev, client) is not None:
            self.leg_d2d(prev, client, bits, "client_part", done, fail)
        else:
            self._up(prev, bits, "client_part", f"{ctx}:{prev}:handoff",
                     lambda: self._down(client, bits, "client_part", done, fail),
                     fail)

    def _client_forward(self, client: str, state, fail) -> None:
        self.holder = client
        sess = self.session
        shard = sess.data.shard_of(client)
        x, labels = shard.batch(state["it"], self.config.batch_size)
        state["x"], state["labels"] = x, labels
        macs = costs.forward_macs(self.model.widths, x.shape[0], 0, self.cut)

        def after_compute():
            smashed, client_cache = mlp.split_forward(
                self.model, mlp.CutSpec(0, self.cut), x)
            state["client_cache"] = client_cache
            state["smashed"] = smashed
            bits = costs.activation_bits(x.shape[0], self.model.widths[self.cut]) \
                + costs.label_bits(x.shape[0])
            self._up(client, bits, "smashed+labels", f"slh{state['it']}:{client}:up",
                     lambda: self._server_turn(client, state, fail), fail)

        self.leg_compute(client, macs, f"fwd:i{state['it']}", after_compute, fail)

    def _server_turn(self, client: str, state, fail) -> None:
        sess = self.session
        widths = self.model.widths
        batch = state["x"].shape[0]
        macs = 3 * costs.forward_macs(widths, batch, self.cut, self.model.num_layers)

        def after_compute():
            _, server_cache = mlp.split_forward(
                self.model, mlp.CutSpec(self.cut, self.model.num_layers),
                state["smashed"])
            state["loss"] = mlp.batch_loss(self.model, server_cache, state["labels"])
            server_grads, smash_grad = mlp.split_backward_server(
                self.model, server_cache, state["labels"])
            state["server_grads"] = server_grads
            bits = costs.activation_bits(batch, widths[self.cut])
            self._down(client, bits, "smashed_grad",
                       lambda: self._client_backward(client, state, smash_grad, fail),
                       fail)

        # the SL server can itself be a battery device (a master UE)
        self.leg_compute(sess.server, macs, f"srv:i{state['it']}", after_compute, fail)

    def _client_backward(self, client: str, state, smash_grad, fail) -> None:
        macs = 2 * costs.forward_macs(self.model.widths, state["x"].shape[0], 0, self.cut)

        def after_compute():
            client_grads, _ = mlp.split_backward_client(
                self.model, state["client_cache"], smash_grad)
            combined = mlp.add_deltas(state["server_grads"], client_grads)
            self.model = mlp.sgd_step(self.model, combined, self.config.lr)
            self.consecutive_failures = 0
            self.maybe_eval(self.session.server, self.model, self.session.data,
                            state["it"], lambda acc: self._finish_iteration(state, acc))

        self.leg_compute(client, macs, f"bwd:i{state['it']}", after_compute, fail)

    def _finish_iteration(self, state, accuracy) -> None:
        self.trace.records.append(self.make_record(
            state["it"], state["start"], state["before"], state["loss"], accuracy,
            state["drops"], state["bytes"]))
        nxt = state["it"] + 1
        self.eng.schedule_after(0.0, EventKind.ROUND_BOUNDARY,
                                lambda: self._begin_iteration(nxt),
                                node=self.session.server, detail=f"iter {state['it']} done")

    def _next_after(self, client: str) -> str | None:
        order = self.session.clients
        if client in order:
            pivot = order.index(client)
        else:
            pivot = -1
        for step in range(1, len(order) + 1):
            candidate = order[(pivot + step) % len(order)]
            if candidate not in self.eng.dropped:
                return candidate
        return None

    def _iteration_failed(self, state) -> None:
        """The iteration lost a participant mid-flight: discard all staged
        work and retry once with the next surviving client in sequence; a
        second consecutive failure aborts the session."""
        self.consecutive_failures += 1
        if self.consecutive_failures >= 2:
            raise SessionAborted("two consecutive client failures")
        retry_client = self._next_after(state["client"])
        if retry_client is None:
            raise AllClientsDropped(f"iteration {state['it']}: no clients left")
        drops = list(state["drops"])
        if state["client"] in self.eng.dropped and state["client"] not in drops:
            drops.append(state["client"])
        retry_state = {
            "start": state["start"], "before": state["before"],
            "bytes": state["bytes"], "it": state["it"],
            "client": retry_client, "drops": drops,
        }
        fail = lambda: self._iteration_failed(retry_state)
        self._deliver_client_part(retry_state["client"], retry_state, fail)

    def run(self) -> MetricsTrace:
        self.eng.schedule(self.eng.clock, EventKind.ROUND_BOUNDARY,
                          lambda: self._begin_iteration(0),
                          node=self.session.server, detail="session start")
        try:
            self.eng.run()
        except SessionAborted as exc:
            self.trace.final_model = self.model
            raise _abort(exc, self.trace)
        self.trace.final_model = self.model
        return self.trace


def run_sl_homogeneous(session: SlSession, topo: NetworkTopology,
                       radio_env: RadioEnv, eng: Engine) -> MetricsTrace:
    if session.variant != "homogeneous":
        raise ScenarioSchemaError(f"expected homogeneous session, got {session.variant!r}")
    return _SlHomoRunner(session, topo, radio_env, eng).run()


# ====================================================================== #
#                         heterogeneous split                            #
# ====================================================================== #

class _SlHeteroRunner(_RunnerBase):
    """Chained split learning: each client owns one contiguous segment, the
    server owns the final segment and the loss. Handoffs between consecutive
    clients ride D2D links (relay = d2d) or bounce through the server
    (relay = via_server). The entry client owns the training data; labels
    travel to the server, the loss owner, in parallel with the forward chain.
    """

    def __init__(self, session: SlSession, topo, radio_env, eng):
        super().__init__("sl_heterogeneous", topo, radio_env, eng, session.scheme,
                         session.config, session.dropout_slope)
        self.session = session
        self.trace = MetricsTrace(protocol="sl_heterogeneous")
        self.model = session.model
        self.assignment = list(session.clients)  # segment k -> client id
        self._iter_drops: list[str] = []
        self._check_relay_links()
        self.assign_block_slots(session.clients)

    def _check_relay_links(self) -> None:
        if self.session.relay != "d2d":
            return
        for a, b in zip(self.assignment, self.assignment[1:]):
            if self.topo.d2d_link(a, b) is None:
                raise MissingD2dLink(f"relay=d2d needs a D2D link {a!r} <-> {b!r}")

    def _segments(self) -> list[mlp.CutSpec]:
        return mlp.contiguous_cuts(self.model.num_layers, self.session.boundaries)[:]

    def _server_segment(self) -> mlp.CutSpec:
        return mlp.CutSpec(self.session.boundaries[-1], self.model.num_layers)

    def _handoff(self, src: str, dst: str, bits: int, payload: str, ctx: str,
                 done, fail) -> None:
        if self.session.relay == "d2d":
            self.leg_d2d(src, dst, bits, payload, done, fail)
        else:
            self.uplink_path(src, self.session.server, bits, payload, f"{ctx}:{src}",
                             lambda: self.downlink_path(self.session.server, dst, bits,
                                                        payload, done, fail),
                             fail)

    def _begin_iteration(self, iteration: int) -> None:
        sess = self.session
        if iteration >= sess.iterations:
            return
        state = {
            "start": self.eng.clock,
            "before": self._snapshot(),
            "bytes": (self.bytes_up, self.bytes_down),
            "it": iteration,
            "staged": [],          # ParamDeltas to combine at commit
            "caches": {},          # client -> ForwardCache
            "labels_done": False,
            "chain_out": None,     # smashed activations at the server's door
        }
        entry = self.assignment[0]
        x, labels = sess.data.shard_of(entry).batch(iteration, self.config.batch_size)
        state["x"], state["labels"] = x, labels
        fail = lambda: self._iteration_failed(state)

        # labels go straight to the loss owner while the chain runs
        def labels_arrived():
            state["labels_done"] = True
            self._maybe_server_turn(state, fail)
        self.uplink_path(entry, sess.server, costs.label_bits(x.shape[0]), "labels",
                         f"slx{iteration}:{entry}:labels", labels_arrived, fail)

        self._forward_segment(0, x, state, fail)

    def _forward_segment(self, k: int, activations, state, fail) -> None:
        client = self.assignment[k]
        seg = self._segments()[k]
        batch = activations.shape[0]
        macs = costs.forward_macs(self.model.widths, batch, seg.start, seg.end)

        def after_compute():
            out, cache = mlp.split_forward(self.model, seg, activations)
            state["caches"][k] = cache
            bits = costs.activation_bits(batch, self.model.widths[seg.end])
            ctx = f"slx{state['it']}"
            if k + 1 < len(self.assignment):
                nxt = self.assignment[k + 1]
                self._handoff(client, nxt, bits, "smashed", ctx,
                              lambda: self._forward_segment(k + 1, out, state, fail),
                              fail)
            else:
                # last client segment feeds the server's segment
                self.uplink_path(client, self.session.server, bits, "smashed",
                                 f"{ctx}:{client}:up",
                                 lambda: self._chain_arrived(out, state, fail), fail)

        self.leg_compute(client, macs, f"fwd{k}:i{state['it']}", after_compute, fail)

    def _chain_arrived(self, out, state, fail) -> None:
        state["chain_out"] = out
        self._maybe_server_turn(state, fail)

    def _maybe_server_turn(self, state, fail) -> None:
        if not state["labels_done"] or state["chain_out"] is None:
            return
        sess = self.session
        seg = self._server_segment()
        batch = state["x"].shape[0]
        macs = 3 * costs.forward_macs(self.model.widths, batch, seg.start, seg.end)

        def after_compute():
            _, server_cache = mlp.split_forward(self.model, seg, state["chain_out"])
            state["loss"] = mlp.batch_loss(self.model, server_cache, state["labels"])
            server_grads, smash_grad = mlp.split_backward_server(
                self.model, server_cache, state["labels"])
            state["staged"].append(server_grads)
            last = self.assignment[-1]
            bits = costs.activation_bits(batch, self.model.widths[seg.start])
            self.downlink_path(sess.server, last, bits, "smashed_grad",
                               lambda: self._backward_segment(len(self.assignment) - 1,
                                                             smash_grad, state, fail),
                               fail)

        self.leg_compute(sess.server, macs, f"srv:i{state['it']}", after_compute, fail)

    def _backward_segment(self, k: int, upstream, state, fail) -> None:
        client = self.assignment[k]
        seg = self._segments()[k]
        batch = state["x"].shape[0]
        macs = 2 * costs.forward_macs(self.model.widths, batch, seg.start, seg.end)

        def after_compute():
            grads, downstream = mlp.split_backward_client(
                self.model, state["caches"][k], upstream)
            state["staged"].append(grads)
            if k == 0:
                self._commit(state)
                return
            bits = costs.activation_bits(batch, self.model.widths[seg.start])
            prev = self.assignment[k - 1]
            self._handoff(client, prev, bits, "smashed_grad", f"slx{state['it']}:bwd",
                          lambda: self._backward_segment(k - 1, downstream, state, fail),
                          fail)

        self.leg_compute(client, macs, f"bwd{k}:i{state['it']}", after_compute, fail)

    def _commit(self, state) -> None:
        combined = state["staged"][0]
        for extra in state["staged"][1:]:
            combined = mlp.add_deltas(combined, extra)
        self.model = mlp.sgd_step(self.model, combined, self.config.lr)
        self.maybe_eval(self.session.server, self.model, self.session.data,
                        state["it"], lambda acc: self._finish(state, acc))

    def _finish(self, state, accuracy) -> None:
        drops, self._iter_drops = self._iter_drops, []
        self.trace.records.append(self.make_record(
            state["it"], state["start"], state["before"], state["loss"], accuracy,
            drops, state["bytes"]))
        nxt = state["it"] + 1
        self.eng.schedule_after(0.0, EventKind.ROUND_BOUNDARY,
                                lambda: self._begin_iteration(nxt),
                                node=self.session.server, detail=f"iter {state['it']} done")

    def _iteration_failed(self, state) -> None:
        """A segment owner died: the whole iteration is discarded, the pool is
        re-formed from surviving clients, and the iteration re-runs."""
        for c in self.assignment:
            if c in self.eng.dropped and c not in self._iter_drops:
                self._iter_drops.append(c)
        survivors = [c for c in self.session.clients if c not in self.eng.dropped]
        if len(survivors) < len(self.session.boundaries):
            raise SessionAborted(
                f"iteration {state['it']}: {len(survivors)} clients left for "
                f"{len(self.session.boundaries)} segments")
        self.assignment = survivors[:len(self.session.boundaries)]
        self._check_relay_links()
        self.eng.schedule_after(0.0, EventKind.ROUND_BOUNDARY,
                                lambda: self._begin_iteration(state["it"]),
                                node=self.session.server,
                                detail=f"iter {state['it']} rerun")

    def run(self) -> MetricsTrace:
        self.eng.schedule(self.eng.clock, EventKind.ROUND_BOUNDARY,
                          lambda: self._begin_iteration(0),
                          node=self.session.server, detail="session start")
        try:
            self.eng.run()
        except SessionAborted as exc:
            self.trace.final_model = self.model
            raise _abort(exc, self.trace)
        self.trace.final_model = self.model
        return self.trace


def run_sl_heterogeneous(session: SlSession, topo: NetworkTopology,
                         radio_env: RadioEnv, eng: Engine) -> MetricsTrace:
    if session.variant != "heterogeneous":
        raise ScenarioSchemaError(f"expected heterogeneous session, got {session.variant!r}")
    return _SlHeteroRunner(session, topo, radio_env, eng).run()


# ====================================================================== #
#                           nested FedSplit                              #
# ====================================================================== #

class _FedSplitRunner(_FlRunner):
    """FL whose designated clients train as split-learning masters over their
    D2D slaves. The upstream server sees one delta per master; slaves never
    appear in its books, only in the physical energy ledger."""

    def __init__(self, session: FlSession, nested: dict[str, SlSession],
                 topo, radio_env, eng):
        super().__init__(session, topo, radio_env, eng, protocol_name="fedsplit_nested")
        self.nested = nested
        for master, sub in nested.items():
            if sub.server != master:
                raise NestedServerMismatch(
                    f"nested session for {master!r} names server {sub.server!r}")
            group = topo.group_containing(master)
            if group is None or group.master != master:
                raise NestedServerMismatch(f"{master!r} is not a D2D group master")
            stray = set(sub.clients) - set(group.slaves)
            if stray:
                raise NestedServerMismatch(
                    f"nested clients {sorted(stray)} are not slaves of {master!r}")

    def delta_sample_count(self, master: str) -> int:
        sub = self.nested.get(master)
        if sub is None:
            return super().delta_sample_count(master)
        return sum(sub.data.shard_of(s).size for s in sub.clients)

    def _client_round(self, client: str, rnd: int, arrive, fail) -> None:
        if client not in self.nested:
            super()._client_round(client, rnd, arrive, fail)
            return
        sess = self.session
        bits = self.global_model.payload_bits
        sub_template = self.nested[client]

        def after_download():
            self._nested_phase(client, rnd, sub_template, after_nested, fail)

        def after_nested(local_model, losses):
            n = self.delta_sample_count(client)
            staged = {
                "delta": mlp.model_delta(local_model, self.global_model, sample_count=n),
                "losses": losses,
                "n": n,
            }
            self.uplink_path(client, sess.server, bits, "delta",
                             f"fs{rnd}:{client}:ul",
                             lambda: arrive(client, staged), fail)

        self.downlink_path(sess.server, client, bits, "model", after_download, fail)

    def _nested_phase(self, master: str, rnd: int, template: SlSession,
                      done, fail) -> None:
        """Run the master's local iterations as homogeneous SL over its slaves,
        sharing this engine and clock. Accuracy is evaluated at the FL level,
        so the nested run never evaluates on its own."""
        sub = SlSession(
            server=master,
            clients=list(template.clients),
            variant="homogeneous",
            iterations=self.session.local_iterations,
            model=mlp.clone(self.global_model),
            scheme=template.scheme,
            config=TrainingConfig(lr=template.config.lr,
                                  batch_size=template.config.batch_size,
                                  cycles_per_mac=template.config.cycles_per_mac,
                                  eval_every=0),
            data=template.data,
            cut_index=template.cut_index,
            dropout_slope=template.dropout_slope,
        )
        inner = _SlHomoRunner(sub, self.topo, self.radio, self.eng,
                              protocol_name="fedsplit_nested",
                              transport_override="d2d")
        inner.trace = _NullTrace()  # the master's work reports through the FL trace
        finished = {"flag": False}

        # completion is detected when the final iteration's record lands;
        # a nested abort takes the master itself out of the FL session
        original_finish = inner._finish_iteration

        def patched_finish(state, accuracy):
            original_finish(state, accuracy)
            if not finished["flag"] and state["it"] + 1 >= sub.iterations:
                finished["flag"] = True
                done(inner.model, [r.loss for r in inner.trace.records])

        def patched_failure(state):
            try:
                _SlHomoRunner._iteration_failed(inner, state)
            except SessionAborted as exc:
                if not finished["flag"]:
                    finished["flag"] = True
                    self.eng.mark_dropped(master, f"nested split aborted: {exc.reason}",
                                          callback=fail)

        inner._finish_iteration = patched_finish
        inner._iteration_failed = patched_failure
        self.eng.schedule(self.eng.clock, EventKind.ROUND_BOUNDARY,
                          lambda: inner._begin_iteration(0),
                          node=master, detail=f"nested r{rnd} start")


class _NullTrace:
    """Record sink for nested runs; keeps losses, stays out of the artifacts."""

    def __init__(self):
        self.records = []
        self.status = "completed"
        self.final_model = None


def run_fedsplit_nested(fl_session: FlSession, nested: dict[str, SlSession],
                        topo: NetworkTopology, radio_env: RadioEnv,
                        eng: Engine) -> MetricsTrace:
    return _FedSplitRunner(fl_session, nested, topo, radio_env, eng).run()
