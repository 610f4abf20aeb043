#include <doctest.h>

#include <cmath>
#include <set>
#include <thread>

#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "timeguard/clockdyn.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/core/rng.hpp"
#include "timeguard/harness.hpp"

using namespace tg;
using namespace tg::harness;

namespace {

// Bitwise reflected CRC-32, polynomial 0xEDB88320.
std::uint32_t crc_oracle(std::span<const std::uint8_t> bytes) {
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::uint8_t b : bytes) {
        c ^= b;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? (c >> 1) ^ 0xEDB88320u : c >> 1;
    }
    return ~c;
}

WireMessage random_message(std::mt19937_64& rng) {
    WireMessage m;
    m.device_id = static_cast<std::uint16_t>(rng());
    m.seq = static_cast<std::uint32_t>(rng());
    m.timestamp_s = static_cast<std::int32_t>(static_cast<std::uint32_t>(rng()));
    m.frac_ms = static_cast<std::uint16_t>(rng() % 1000);
    m.features.resize(rng() % 9);
    for (double& f : m.features) f = 1e3 * normal_draw(rng);
    return m;
}

void put_crc(std::vector<std::uint8_t>& b) {
    const std::size_t body = b.size() - kCrcBytes;
    const auto c = crc_oracle(std::span(b).first(body));
    for (int i = 0; i < 4; ++i) b[body + i] = static_cast<std::uint8_t>(c >> (24 - 8 * i));
}

SimulationConfig two_nominal() {
    auto c = default_simulation();
    c.nodes[0].scenario = {};
    return c;
}

}  // namespace

TEST_CASE("crc32 matches the bitwise oracle and the check value") {
    const std::string check = "123456789";
    const std::span bytes(reinterpret_cast<const std::uint8_t*>(check.data()), check.size());
    CHECK(crc32(bytes) == 0xCBF43926u);
    auto rng = make_rng(3, Stream::diag);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::uint8_t> b(rng() % 300);
        for (auto& v : b) v = static_cast<std::uint8_t>(rng());
        CHECK(crc32(b) == crc_oracle(b));
    }
}

TEST_CASE("wire layout is big endian with the int32 maximum as 7F FF FF FF") {
    WireMessage m;
    m.device_id = 0x0102;
    m.seq = 0x03040506;
    m.timestamp_s = 2147483647;
    m.frac_ms = 999;
    m.features = {1.0};
    const auto b = encode_message(m);
    REQUIRE(b.size() == m.encoded_size());
    CHECK(b.size() == 28);
    CHECK(b[0] == 0x54);
    CHECK(b[1] == 0x47);
    CHECK(b[2] == 0x01);
    CHECK(b[3] == 0x01);
    CHECK(b[4] == 0x02);
    CHECK(b[5] == 0x03);
    CHECK(b[8] == 0x06);
    CHECK(b[9] == 0x7F);
    CHECK(b[10] == 0xFF);
    CHECK(b[11] == 0xFF);
    CHECK(b[12] == 0xFF);
    CHECK(b[13] == 0x03);
    CHECK(b[14] == 0xE7);
    CHECK(b[15] == 1);
    CHECK(b[16] == 0x3F);  // 1.0 = 0x3FF0000000000000
    CHECK(b[17] == 0xF0);
}

TEST_CASE("stamp splits reported time and wraps at the 2^31 boundary") {
    CHECK(stamp(1, 0, 2147483647.5, {}).timestamp_s == 2147483647);
    CHECK(stamp(1, 0, 2147483647.5, {}).frac_ms == 500);
    CHECK(stamp(1, 0, 2147483648.0, {}).timestamp_s == -2147483648);
    CHECK(stamp(1, 0, 4294967296.25, {}).timestamp_s == 0);
    CHECK(wire_seconds(stamp(1, 0, 2147483648.25, {})) == doctest::Approx(-2147483647.75));
    CHECK(stamp(1, 0, 1.9999999, {}).frac_ms == 999);
}

TEST_CASE("encode/decode round trip") {
    auto rng = make_rng(5, Stream::diag);
    for (int trial = 0; trial < 500; ++trial) {
        const auto m = random_message(rng);
        const auto d = decode_message(encode_message(m));
        REQUIRE(d.error == DecodeError::ok);
        CHECK(d.message == m);
    }
}

TEST_CASE("encode rejects out-of-range fields") {
    WireMessage m;
    m.frac_ms = 1000;
    CHECK_THROWS_AS(encode_message(m), ValidationError);
    m.frac_ms = 0;
    m.features.resize(256);
    CHECK_THROWS_AS(encode_message(m), ValidationError);
}

TEST_CASE("decode reports a distinct error per malformation") {
    WireMessage m;
    m.features = {2.0, 3.0};
    const auto good = encode_message(m);

    CHECK(decode_message(std::span(good).first(10)).error == DecodeError::too_short);
    auto b = good;
    b[0] = 0;
    CHECK(decode_message(b).error == DecodeError::bad_magic);
    b = good;
    b[2] = 2;
    CHECK(decode_message(b).error == DecodeError::bad_version);
    b = good;
    b.push_back(0);
    CHECK(decode_message(b).error == DecodeError::bad_length);
    b = good;
    b[20] ^= 0x10;
    CHECK(decode_message(b).error == DecodeError::bad_crc);
    b = good;
    b[13] = 0x03;
    b[14] = 0xE8;  // 1000 ms, checksum recomputed
    put_crc(b);
    CHECK(decode_message(b).error == DecodeError::bad_frac);

    std::set<std::string> names;
    for (auto e : {DecodeError::ok, DecodeError::too_short, DecodeError::bad_magic, DecodeError::bad_version,
                   DecodeError::bad_length, DecodeError::bad_crc, DecodeError::bad_frac})
        names.insert(to_string(e));
    CHECK(names.size() == 7);
}

TEST_CASE("any single bit flip is rejected") {
    auto rng = make_rng(7, Stream::diag);
    const auto good = encode_message(random_message(rng));
    for (std::size_t i = 0; i < good.size(); ++i)
        for (int bit = 0; bit < 8; ++bit) {
            auto b = good;
            b[i] ^= static_cast<std::uint8_t>(1u << bit);
            CHECK(decode_message(b).error != DecodeError::ok);
        }
}

TEST_CASE("frame reader reassembles any chunking") {
    auto rng = make_rng(11, Stream::diag);
    std::vector<std::vector<std::uint8_t>> payloads;
    std::vector<std::uint8_t> stream;
    for (int i = 0; i < 50; ++i) {
        payloads.push_back(encode_message(random_message(rng)));
        const auto f = frame(payloads.back());
        stream.insert(stream.end(), f.begin(), f.end());
    }
    for (int trial = 0; trial < 20; ++trial) {
        FrameReader reader;
        std::vector<std::vector<std::uint8_t>> got;
        std::size_t pos = 0;
        while (pos < stream.size()) {
            const std::size_t n = std::min<std::size_t>(stream.size() - pos, 1 + rng() % 97);
            reader.feed(std::span(stream).subspan(pos, n));
            pos += n;
            while (auto f = reader.next()) got.push_back(*f);
        }
        CHECK(got == payloads);
        CHECK(reader.buffered() == 0);
        CHECK_FALSE(reader.broken());
    }
}

TEST_CASE("frame reader flags an oversized length prefix") {
    FrameReader reader;
    const std::vector<std::uint8_t> bad{0x7F, 0xFF, 0xFF, 0xFF, 0x00};
    reader.feed(bad);
    CHECK_FALSE(reader.next());
    CHECK(reader.broken());
}

TEST_CASE("inbox delivers every chunk from concurrent producers") {
    Inbox inbox;
    std::vector<std::thread> producers;
    for (int s = 0; s < 4; ++s)
        producers.emplace_back([&inbox, s] {
            for (int i = 0; i < 250; ++i) inbox.push(s, {static_cast<std::uint8_t>(i)});
            inbox.close(s);
        });
    std::array<int, 4> counts{}, closed{};
    for (int open = 4; open > 0;) {
        auto e = inbox.pop();
        if (e.closed) {
            ++closed[e.source];
            --open;
        } else {
            CHECK(e.bytes.front() == static_cast<std::uint8_t>(counts[e.source]));
            ++counts[e.source];
        }
    }
    for (auto& t : producers) t.join();
    CHECK(counts == std::array<int, 4>{250, 250, 250, 250});
    CHECK(closed == std::array<int, 4>{1, 1, 1, 1});
}

TEST_CASE("sensor payload is independent of the timing scenario") {
    NodeConfig a;
    a.device_id = 9;
    NodeConfig b = a;
    b.scenario.kind = datagen::ScenarioKind::drift_escalation;
    b.scenario.onset = 100;
    b.scenario.magnitude = 25.0;
    const auto pa = plan_sensor(a, 400, 3, {});
    const auto pb = plan_sensor(b, 400, 3, {});
    bool tau_differs = false;
    for (std::size_t t = 0; t < 400; ++t) {
        CHECK(pa.trace.rows[t].x == pb.trace.rows[t].x);
        tau_differs = tau_differs || pa.trace.rows[t].tau != pb.trace.rows[t].tau;
    }
    CHECK(tau_differs);
    // A different device id gives different physical values.
    NodeConfig c = a;
    c.device_id = 10;
    CHECK(plan_sensor(c, 400, 3, {}).trace.rows[5].x != pa.trace.rows[5].x);
}

TEST_CASE("every packet carries wrap32(floor(tau))") {
    NodeConfig n;
    n.device_id = 4;
    n.scenario.kind = datagen::ScenarioKind::epoch_overflow;
    n.scenario.onset = 50;
    const auto plan = plan_sensor(n, 120, 1, {});
    Inbox inbox;
    InboxSink sink(inbox, 0);
    std::atomic<bool> stop{false};
    const auto r = sensor_node_run(n, plan, sink, stop);
    CHECK(r.packets == 120);
    FrameReader reader;
    std::size_t seq = 0;
    bool saw_negative = false;
    while (true) {
        auto e = inbox.pop();
        if (e.closed) break;
        reader.feed(e.bytes);
        while (auto f = reader.next()) {
            const auto d = decode_message(*f);
            REQUIRE(d.error == DecodeError::ok);
            const double tau = plan.trace.rows[seq].tau;
            CHECK(d.message.seq == seq);
            CHECK(d.message.timestamp_s == clockdyn::wrap32(static_cast<std::int64_t>(std::floor(tau))));
            CHECK(d.message.features == plan.trace.rows[seq].x);
            saw_negative = saw_negative || d.message.timestamp_s < 0;
            ++seq;
        }
    }
    CHECK(seq == 120);
    CHECK(saw_negative);
}

TEST_CASE("tracker unwraps the wire view back to the internal timeline") {
    NodeConfig n;
    n.device_id = 2;
    n.clock.jitter_scale = 5e-4;
    n.scenario.kind = datagen::ScenarioKind::epoch_overflow;
    n.scenario.onset = 200;
    const auto plan = plan_sensor(n, 400, 8, {});
    TimestampTracker tracker(plan.trace.start_time, 1.0, 10.0);
    for (std::size_t t = 0; t < plan.trace.rows.size(); ++t) {
        const auto& row = plan.trace.rows[t];
        const auto s = tracker.observe(static_cast<std::uint32_t>(t), wire_seconds(stamp(2, t, row.tau, {})));
        CHECK(std::abs(s.unwrapped - row.tau) < 1e-3 + 1e-6);
        CHECK(s.d[3] == row.d[3]);
        CHECK(std::abs(s.d[1] - (row.d[1] + row.d[2])) < 2e-3);
        CHECK(s.time_features[datagen::kEpochOverflowFlag] == row.time_features[datagen::kEpochOverflowFlag]);
    }
    CHECK(tracker.wraps() == 1);
}

TEST_CASE("simulation config validation") {
    auto c = default_simulation();
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.nodes[1].device_id = bad.nodes[0].device_id;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.nodes[1].emit_interval_ms = 500;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = c;
    bad.nodes[0].scenario.onset = 5000;
    CHECK_THROWS_AS(run_simulation(bad, test::small_checkpoint()), ValidationError);
    bad = c;
    bad.nodes[0].emit_interval_ms = bad.nodes[1].emit_interval_ms = 500;
    CHECK_THROWS_AS(run_simulation(bad, test::small_checkpoint()), ValidationError);  // dt mismatch
    bad = c;
    bad.nodes.clear();
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("simulation config JSON round trip and strictness") {
    auto c = default_simulation();
    c.mode = TransportMode::socket;
    c.nodes[1].stop_after = 40;
    c.nodes[0].corrupt_every = 7;
    const auto j = simulation_json(c);
    CHECK(simulation_json(simulation_from_json(j)) == j);
    auto extra = j;
    extra["nodes"][0]["colour"] = 1;
    CHECK_THROWS_WITH_AS(simulation_from_json(extra), doctest::Contains("simulation.nodes[0].colour"),
                         ValidationError);
    auto wrong = j;
    wrong["duration_s"] = "long";
    CHECK_THROWS_AS(simulation_from_json(wrong), ValidationError);
    auto mode = j;
    mode["mode"] = "udp";
    CHECK_THROWS_AS(simulation_from_json(mode), ValidationError);
}

TEST_CASE("clean two-node run raises no alarm") {
    const auto rep = run_simulation(two_nominal(), test::small_checkpoint());
    CHECK(rep.decode_errors == 0);
    REQUIRE(rep.devices.size() == 2);
    for (const auto& d : rep.devices) {
        CHECK(d.packets == 600);
        CHECK(d.decided == 600 - 29);
        CHECK(d.fired == 0);
        CHECK_FALSE(d.first_negative_seq);
    }
    CHECK(rep.fired().empty());
    CHECK(rep.latency.count == 2 * (600 - 29));
}

TEST_CASE("forced overflow is flagged within five steps of the wrap") {
    const auto rep = run_simulation(default_simulation(), test::small_checkpoint());
    const auto* d = rep.device(1);
    REQUIRE(d);
    REQUIRE(d->first_negative_seq);
    REQUIRE(d->first_fire_after_onset);
    CHECK(*d->first_fire_after_onset - *d->first_negative_seq <= 5);
    CHECK(*d->first_negative_seq == 299);
    CHECK(rep.device(2)->fired == 0);
    const auto fired = rep.fired();
    REQUIRE_FALSE(fired.empty());
    CHECK((fired.front().detection.reason & detector::kReasonOverflow) != 0);
}

TEST_CASE("a dead sensor does not stall the other device") {
    auto c = default_simulation();
    c.nodes[1].stop_after = 150;
    const auto rep = run_simulation(c, test::small_checkpoint());
    CHECK(rep.device(2)->packets == 150);
    CHECK(rep.device(1)->packets == 600);
    CHECK(rep.device(1)->decided == 600 - 29);
    CHECK(rep.device(1)->first_fire_after_onset);
    CHECK(rep.device(2)->decided == 150 - 29);
}

TEST_CASE("corrupted packets are counted and skipped") {
    auto c = two_nominal();
    c.nodes[0].corrupt_every = 50;
    const auto rep = run_simulation(c, test::small_checkpoint());
    CHECK(rep.decode_errors == 12);
    CHECK(rep.decode_errors_by_kind.at("bad_crc") == 12);
    CHECK(rep.device(1)->packets == 588);
    CHECK(rep.device(2)->packets == 600);
}

TEST_CASE("socket transport reproduces in-process decisions") {
    auto c = default_simulation();
    const auto local = run_simulation(c, test::small_checkpoint());
    c.mode = TransportMode::socket;
    const auto remote = run_simulation(c, test::small_checkpoint());
    CHECK(remote.mode == "socket");
    REQUIRE(remote.detections.size() == local.detections.size());
    for (std::size_t i = 0; i < local.detections.size(); ++i) {
        CHECK(remote.detections[i].device == local.detections[i].device);
        CHECK(remote.detections[i].detection == local.detections[i].detection);
    }
}

TEST_CASE("repeated runs are identical") {
    const auto a = report_json(run_simulation(default_simulation(), test::small_checkpoint()));
    const auto b = report_json(run_simulation(default_simulation(), test::small_checkpoint()));
    auto strip = [](nlohmann::json j) {
        j.erase("latency_ms");
        return j;
    };
    CHECK(strip(a) == strip(b));
}

TEST_CASE("socket mode fails cleanly on an occupied port") {
    TcpListener holder("127.0.0.1", 0);
    auto c = default_simulation();
    c.mode = TransportMode::socket;
    c.port = holder.port();
    CHECK_THROWS_AS(run_simulation(c, test::small_checkpoint()), RuntimeError);
}
