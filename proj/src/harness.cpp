#include "timeguard/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>
#include <zlib.h>

#include "timeguard/clockdyn.hpp"
#include "timeguard/config_json.hpp"
#include "timeguard/core/error.hpp"
#include "timeguard/evaluation.hpp"

namespace tg::harness {

// ---- codec -----------------------------------------------------------------------

std::string to_string(DecodeError e) {
    switch (e) {
        case DecodeError::ok: return "ok";
        case DecodeError::too_short: return "too_short";
        case DecodeError::bad_magic: return "bad_magic";
        case DecodeError::bad_version: return "bad_version";
        case DecodeError::bad_length: return "bad_length";
        case DecodeError::bad_crc: return "bad_crc";
        case DecodeError::bad_frac: return "bad_frac";
    }
    return "unknown";
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

namespace {

template <class T>
void put_be(std::vector<std::uint8_t>& out, T v) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (int shift = 8 * (static_cast<int>(sizeof(U)) - 1); shift >= 0; shift -= 8)
        out.push_back(static_cast<std::uint8_t>(u >> shift));
}

template <class U>
U get_be(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v = static_cast<U>((v << 8) | p[i]);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_message(const WireMessage& msg) {
    if (msg.frac_ms > 999) throw ValidationError("wire: frac_ms must be <= 999");
    if (msg.features.size() > 255) throw ValidationError("wire: at most 255 features");
    std::vector<std::uint8_t> out;
    out.reserve(msg.encoded_size());
    out.push_back(kMagic0);
    out.push_back(kMagic1);
    out.push_back(kWireVersion);
    put_be(out, msg.device_id);
    put_be(out, msg.seq);
    put_be(out, msg.timestamp_s);
    put_be(out, msg.frac_ms);
    out.push_back(static_cast<std::uint8_t>(msg.features.size()));
    for (double f : msg.features) put_be(out, std::bit_cast<std::uint64_t>(f));
    put_be(out, crc32(out));
    return out;
}

Decoded decode_message(std::span<const std::uint8_t> b) {
    Decoded d;
    if (b.size() < kHeaderBytes + kCrcBytes) {
        d.error = DecodeError::too_short;
        return d;
    }
    if (b[0] != kMagic0 || b[1] != kMagic1) {
        d.error = DecodeError::bad_magic;
        return d;
    }
    if (b[2] != kWireVersion) {
        d.error = DecodeError::bad_version;
        return d;
    }
    const std::size_t count = b[15];
    if (b.size() != kHeaderBytes + 8 * count + kCrcBytes) {
        d.error = DecodeError::bad_length;
        return d;
    }
    const std::size_t body = b.size() - kCrcBytes;
    if (crc32(b.first(body)) != get_be<std::uint32_t>(b.data() + body)) {
        d.error = DecodeError::bad_crc;
        return d;
    }
    auto& m = d.message;
    m.device_id = get_be<std::uint16_t>(b.data() + 3);
    m.seq = get_be<std::uint32_t>(b.data() + 5);
    m.timestamp_s = static_cast<std::int32_t>(get_be<std::uint32_t>(b.data() + 9));
    m.frac_ms = get_be<std::uint16_t>(b.data() + 13);
    if (m.frac_ms > 999) {
        d.error = DecodeError::bad_frac;
        d.message = {};
        return d;
    }
    m.features.resize(count);
    for (std::size_t i = 0; i < count; ++i)
        m.features[i] = std::bit_cast<double>(get_be<std::uint64_t>(b.data() + kHeaderBytes + 8 * i));
    return d;
}

WireMessage stamp(std::uint16_t device_id, std::uint32_t seq, double tau, std::vector<double> features) {
    WireMessage m;
    m.device_id = device_id;
    m.seq = seq;
    const double whole = std::floor(tau);
    m.timestamp_s = clockdyn::wrap32(static_cast<std::int64_t>(whole));
    m.frac_ms = static_cast<std::uint16_t>(std::clamp(std::floor((tau - whole) * 1000.0), 0.0, 999.0));
    m.features = std::move(features);
    return m;
}

double wire_seconds(const WireMessage& msg) { return static_cast<double>(msg.timestamp_s) + msg.frac_ms / 1000.0; }

// ---- framing ---------------------------------------------------------------------

std::vector<std::uint8_t> frame(std::span<const std::uint8_t> payload) {
    if (payload.size() > kMaxFrameBytes) throw ValidationError("frame: payload too large");
    std::vector<std::uint8_t> out;
    out.reserve(payload.size() + 4);
    put_be(out, static_cast<std::uint32_t>(payload.size()));
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
    if (pos_ > 0 && pos_ == buffer_.size()) {
        buffer_.clear();
        pos_ = 0;
    }
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<std::vector<std::uint8_t>> FrameReader::next() {
    if (broken_ || buffered() < 4) return std::nullopt;
    const std::uint32_t len = get_be<std::uint32_t>(buffer_.data() + pos_);
    if (len > kMaxFrameBytes) {
        broken_ = true;
        return std::nullopt;
    }
    if (buffered() < 4 + static_cast<std::size_t>(len)) return std::nullopt;
    const auto begin = buffer_.begin() + static_cast<std::ptrdiff_t>(pos_ + 4);
    std::vector<std::uint8_t> out(begin, begin + len);
    pos_ += 4 + len;
    if (pos_ > 65536 && pos_ * 2 > buffer_.size()) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos_));
        pos_ = 0;
    }
    return out;
}

// ---- transports ------------------------------------------------------------------

void Inbox::push(int source, std::vector<std::uint8_t> bytes) {
    {
        std::lock_guard lock(mu_);
        events_.push_back({source, std::move(bytes), false});
    }
    cv_.notify_one();
}

void Inbox::close(int source) {
    {
        std::lock_guard lock(mu_);
        events_.push_back({source, {}, true});
    }
    cv_.notify_one();
}

Inbox::Event Inbox::pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !events_.empty(); });
    Event e = std::move(events_.front());
    events_.pop_front();
    return e;
}

bool InboxSink::send(std::span<const std::uint8_t> framed) {
    if (closed_) return false;
    inbox_->push(source_, std::vector<std::uint8_t>(framed.begin(), framed.end()));
    return true;
}

void InboxSink::close() {
    if (closed_) return;
    closed_ = true;
    inbox_->close(source_);
}

namespace {

sockaddr_in make_addr(const std::string& host, int port) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw ValidationError("invalid IPv4 address '" + host + "'");
    return addr;
}

}  // namespace

TcpSink::TcpSink(const std::string& host, int port, int retries) {
    const auto addr = make_addr(host, port);
    for (int attempt = 0; attempt < std::max(1, retries); ++attempt) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw RuntimeError(std::string("socket: ") + std::strerror(errno));
        if (::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) return;
        ::close(fd_);
        fd_ = -1;
        std::this_thread::sleep_for(std::chrono::milliseconds(50 * (attempt + 1)));
    }
    throw RuntimeError("cannot connect to " + host + ":" + std::to_string(port));
}

TcpSink::~TcpSink() { close(); }

bool TcpSink::send(std::span<const std::uint8_t> framed) {
    std::size_t sent = 0;
    while (fd_ >= 0 && sent < framed.size()) {
        const auto n = ::send(fd_, framed.data() + sent, framed.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        sent += static_cast<std::size_t>(n);
    }
    return fd_ >= 0;
}

void TcpSink::close() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_WR);
        ::close(fd_);
        fd_ = -1;
    }
}

TcpListener::TcpListener(const std::string& host, int port) {
    const auto addr = make_addr(host, port);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw RuntimeError(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
        const std::string err = std::strerror(errno);
        ::close(fd_);
        throw RuntimeError("cannot bind " + host + ":" + std::to_string(port) + ": " + err);
    }
    if (::listen(fd_, 16) != 0) {
        ::close(fd_);
        throw RuntimeError(std::string("listen: ") + std::strerror(errno));
    }
    sockaddr_in bound{};
    socklen_t len = sizeof bound;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
}

int TcpListener::accept_one(int timeout_ms) {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, timeout_ms);
    if (r <= 0) throw RuntimeError("accept: no sensor connected within " + std::to_string(timeout_ms) + " ms");
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) throw RuntimeError(std::string("accept: ") + std::strerror(errno));
    return c;
}

void pump_socket(int fd, Inbox& inbox, int source) {
    std::vector<std::uint8_t> buf(65536);
    while (true) {
        const auto n = ::recv(fd, buf.data(), buf.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        inbox.push(source, std::vector<std::uint8_t>(buf.begin(), buf.begin() + n));
    }
    ::close(fd);
    inbox.close(source);
}

// ---- sensor node -----------------------------------------------------------------

void NodeConfig::validate(std::int64_t ticks) const {
    if (device_id < 0 || device_id > 65535) throw ValidationError("node: device_id must fit in 16 bits");
    if (!(emit_interval_ms > 0.0)) throw ValidationError("node: emit interval must be > 0");
    if (corrupt_every < 0) throw ValidationError("node: corrupt_every must be >= 0");
    if (stop_after && *stop_after < 0) throw ValidationError("node: stop_after must be >= 0");
    clock.validate();
    physical.validate();
    scenario.validate(ticks);
}

SensorPlan plan_sensor(const NodeConfig& node, std::int64_t ticks, std::uint64_t seed,
                       const clockdyn::TimeConstants& base) {
    node.validate(ticks);
    clockdyn::TimeConstants constants = base;
    constants.dt = node.emit_interval_ms / 1000.0;
    // Physical and clock streams depend only on (seed, device): a distorted
    // and an undistorted node report identical sensor values.
    const std::uint64_t dev_seed = seed * 1000003ULL + static_cast<std::uint64_t>(node.device_id);
    const Mat phys = datagen::synth_physical(node.physical, ticks, dev_seed);
    datagen::TraceOptions opts;
    if (node.start_time) opts.start_time = *node.start_time;
    SensorPlan plan;
    plan.trace = datagen::build_device_trace(phys, node.clock, node.scenario, constants, dev_seed, opts);
    plan.trace.device_id = node.device_id;
    plan.dt = constants.dt;
    return plan;
}

SensorResult sensor_node_run(const NodeConfig& node, const SensorPlan& plan, Sink& sink,
                             const std::atomic<bool>& stop, double pace_ms) {
    SensorResult r;
    const auto& rows = plan.trace.rows;
    for (std::size_t s = 0; s < rows.size(); ++s) {
        if (stop.load(std::memory_order_relaxed)) break;
        if (node.stop_after && r.packets >= *node.stop_after) break;
        auto bytes = encode_message(
            stamp(static_cast<std::uint16_t>(node.device_id), static_cast<std::uint32_t>(s), rows[s].tau, rows[s].x));
        if (node.corrupt_every > 0 && (s + 1) % static_cast<std::size_t>(node.corrupt_every) == 0)
            bytes[kHeaderBytes] ^= 0x01;
        bool ok = false;
        for (int attempt = 0; attempt < 3 && !ok; ++attempt) ok = sink.send(frame(bytes));
        if (!ok) {
            r.error = "transport failure after " + std::to_string(r.packets) + " packets";
            break;
        }
        ++r.packets;
        if (pace_ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(pace_ms));
    }
    sink.close();
    return r;
}

// ---- inference node ----------------------------------------------------------------

TimestampTracker::TimestampTracker(double reference_start, double dt, double overflow_margin)
    : reference_start_(reference_start), dt_(dt), margin_(overflow_margin) {}

TimestampTracker::Sample TimestampTracker::observe(std::uint32_t seq, double wire_time) {
    constexpr double half = static_cast<double>(clockdyn::kEpochLimit);
    constexpr double full = 2.0 * half;
    if (!first_ && wire_time - prev_raw_ < -half) ++epoch_;
    Sample s;
    s.raw = wire_time;
    s.unwrapped = wire_time + static_cast<double>(epoch_) * full;
    const double psi = s.unwrapped - (reference_start_ + static_cast<double>(seq) * dt_);
    if (psi >= half / 2.0) overflow_ = 1;
    const double delta = psi - overflow_ * half;
    s.d = {dt_ + psi - prev_psi_, delta, 0.0, static_cast<double>(overflow_)};
    auto& tf = s.time_features;
    tf[datagen::kTimestampDrift] = psi;
    tf[datagen::kDriftRate] = first_ ? 0.0 : (delta - prev_delta_) / dt_;
    tf[datagen::kJitterMs] = first_ ? 0.0 : std::abs((s.unwrapped - prev_unwrapped_) - dt_) * 1000.0;
    tf[datagen::kNtpOffsetMs] = 0.0;
    tf[datagen::kEpochOverflowFlag] = overflow_;
    s.proximity = stgat::overflow_proximity(s.unwrapped, margin_);
    first_ = false;
    prev_raw_ = wire_time;
    prev_unwrapped_ = s.unwrapped;
    prev_psi_ = psi;
    prev_delta_ = delta;
    return s;
}

std::optional<std::int64_t> DeviceReport::delay() const {
    if (!onset || !first_fire_after_onset) return std::nullopt;
    return *first_fire_after_onset - *onset;
}

const DeviceReport* SimulationReport::device(int id) const {
    for (const auto& d : devices)
        if (d.device_id == id) return &d;
    return nullptr;
}

std::vector<detector::LoggedDetection> SimulationReport::fired() const {
    std::vector<detector::LoggedDetection> out;
    for (const auto& d : detections)
        if (d.detection.fired) out.push_back(d);
    return out;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Packet {
    WireMessage msg;
    Clock::time_point received;
};

struct DeviceState {
    std::map<std::uint32_t, Packet> pending;
    bool closed = false;
    std::optional<TimestampTracker> tracker;
    detector::DetectorState det;
};

}  // namespace

SimulationReport inference_node_run(Inbox& inbox, int n_sources, const stgat::Checkpoint& model,
                                    const InferenceConfig& config) {
    const std::size_t N = config.device_ids.size();
    if (N == 0 || config.graph.n_nodes != static_cast<int>(N) || config.reference_start.size() != N ||
        config.onsets.size() != N)
        throw ValidationError("inference: graph, device ids, reference times and onsets must agree");
    auto dp = config.detector;
    dp.dt = config.dt;
    dp.overflow_margin = model.hyper.overflow_margin;
    dp.validate();

    std::map<int, std::size_t> node_of;
    for (std::size_t i = 0; i < N; ++i) node_of[config.device_ids[i]] = i;
    eval::OnlinePredictor predictor(model.params, model.hyper, config.graph, model.window);
    const std::array<double, 4> w_o{model.params.over_w.data[0], model.params.over_w.data[1],
                                    model.params.over_w.data[2], model.params.over_w.data[3]};

    SimulationReport rep;
    rep.devices.resize(N);
    std::vector<DeviceState> dev(N);
    for (std::size_t i = 0; i < N; ++i) {
        rep.devices[i].device_id = config.device_ids[i];
        rep.devices[i].onset = config.onsets[i];
        dev[i].tracker.emplace(config.reference_start[i], config.dt, model.hyper.overflow_margin);
    }
    std::map<int, FrameReader> readers;
    std::map<int, std::vector<std::size_t>> served;  // source -> nodes seen on it
    std::vector<double> latencies;
    int open_sources = n_sources;
    std::uint32_t next_step = 0;

    auto count_error = [&](const std::string& kind) {
        ++rep.decode_errors;
        ++rep.decode_errors_by_kind[kind];
    };

    auto process_ready_steps = [&] {
        while (true) {
            std::vector<std::size_t> participants;
            bool any_open_or_pending = false;
            for (std::size_t i = 0; i < N; ++i) {
                auto& d = dev[i];
                const bool has_k = d.pending.count(next_step) > 0;
                const bool has_later = !d.pending.empty() && d.pending.rbegin()->first > next_step;
                if (has_k) {
                    participants.push_back(i);
                } else if (!d.closed && !has_later) {
                    return;  // still waiting on this device
                }
                if (!d.closed || !d.pending.empty()) any_open_or_pending = true;
            }
            if (!any_open_or_pending) return;
            if (participants.empty()) {
                bool later = false;
                for (const auto& d : dev) later = later || !d.pending.empty();
                if (!later) return;
                ++next_step;
                continue;
            }
            std::vector<int> ready;
            std::vector<Packet> packets(N);
            std::vector<TimestampTracker::Sample> samples(N);
            for (std::size_t i : participants) {
                auto& d = dev[i];
                packets[i] = std::move(d.pending.at(next_step));
                d.pending.erase(next_step);
                samples[i] = d.tracker->observe(next_step, wire_seconds(packets[i].msg));
                if (samples[i].raw < 0.0 && !rep.devices[i].first_negative_seq)
                    rep.devices[i].first_negative_seq = next_step;
                datagen::TraceRow row;
                row.x = packets[i].msg.features;
                const auto norm = datagen::normalize_apply({row}, model.normalization);
                const auto x = stgat::model_inputs(norm.front().x, samples[i].time_features, model.hyper);
                const auto d_norm = stgat::normalize_drift_inputs(samples[i].d, model.normalization);
                predictor.push(static_cast<int>(i), x, d_norm, samples[i].proximity);
                if (predictor.ready(static_cast<int>(i))) ready.push_back(static_cast<int>(i));
            }
            if (!ready.empty()) {
                const auto outs = predictor.predict(ready);
                for (std::size_t r = 0; r < ready.size(); ++r) {
                    const auto i = static_cast<std::size_t>(ready[r]);
                    const detector::StepInput in{outs[r].p_hat, outs[r].delta_hat, samples[i].raw,
                                                 samples[i].proximity};
                    auto det = detector::decide_step(dev[i].det, in, dp, w_o);
                    det.step = next_step;
                    rep.detections.push_back({config.device_ids[i], det});
                    auto& dr = rep.devices[i];
                    ++dr.decided;
                    if (det.fired) {
                        ++dr.fired;
                        if (dr.onset && static_cast<std::int64_t>(next_step) >= *dr.onset && !dr.first_fire_after_onset)
                            dr.first_fire_after_onset = next_step;
                    }
                    latencies.push_back(
                        std::chrono::duration<double, std::milli>(Clock::now() - packets[i].received).count());
                }
            }
            ++next_step;
        }
    };

    while (open_sources > 0) {
        auto ev = inbox.pop();
        if (ev.closed) {
            --open_sources;
            for (std::size_t i : served[ev.source]) dev[i].closed = true;
            auto& reader = readers[ev.source];
            if (reader.buffered() > 0 || reader.broken()) count_error("truncated_frame");
            process_ready_steps();
            continue;
        }
        auto& reader = readers[ev.source];
        if (reader.broken()) continue;
        reader.feed(ev.bytes);
        while (auto f = reader.next()) {
            const auto now = Clock::now();
            auto dec = decode_message(*f);
            if (dec.error != DecodeError::ok) {
                count_error(to_string(dec.error));
                continue;
            }
            auto it = node_of.find(dec.message.device_id);
            if (it == node_of.end()) {
                count_error("unknown_device");
                continue;
            }
            const std::size_t i = it->second;
            auto& srv = served[ev.source];
            if (std::find(srv.begin(), srv.end(), i) == srv.end()) srv.push_back(i);
            if (dec.message.seq < next_step || dev[i].pending.count(dec.message.seq)) {
                count_error("stale_seq");
                continue;
            }
            ++rep.devices[i].packets;
            dev[i].pending[dec.message.seq] = {std::move(dec.message), now};
        }
        if (reader.broken()) count_error("bad_frame");
        process_ready_steps();
    }
    // Sources that closed before sending anything never mapped to a device.
    for (auto& d : dev) d.closed = true;
    process_ready_steps();

    if (!latencies.empty()) {
        auto& l = rep.latency;
        l.count = static_cast<std::int64_t>(latencies.size());
        double sum = 0.0;
        for (double v : latencies) sum += v;
        l.mean_ms = sum / static_cast<double>(latencies.size());
        auto sorted = latencies;
        std::sort(sorted.begin(), sorted.end());
        const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size())));
        l.p95_ms = sorted[std::max<std::size_t>(rank, 1) - 1];
        l.max_ms = sorted.back();
    }
    return rep;
}

// ---- orchestration -----------------------------------------------------------------

void SimulationConfig::validate() const {
    if (!(duration_s > 0.0)) throw ValidationError("simulation: duration_s must be > 0");
    if (nodes.empty()) throw ValidationError("simulation: at least one node");
    if (port < 0 || port > 65535) throw ValidationError("simulation: port out of range");
    if (pace_ms < 0.0) throw ValidationError("simulation: pace_ms must be >= 0");
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].emit_interval_ms != nodes.front().emit_interval_ms)
            throw ValidationError("simulation: all nodes must share one emit interval");
        for (std::size_t j = 0; j < i; ++j)
            if (nodes[j].device_id == nodes[i].device_id)
                throw ValidationError("simulation: duplicate device id " + std::to_string(nodes[i].device_id));
    }
    detector.validate();
}

SimulationConfig default_simulation() {
    SimulationConfig c;
    NodeConfig a;
    a.device_id = 1;
    a.clock.sigma = 1e-3;
    a.clock.alpha = 0.99;
    a.clock.jitter_scale = 5e-4;
    a.scenario.kind = datagen::ScenarioKind::epoch_overflow;
    a.scenario.onset = 300;
    NodeConfig b = a;
    b.device_id = 2;
    b.scenario = {};
    c.nodes = {a, b};
    return c;
}

namespace {

std::int64_t tick_count(const SimulationConfig& c) {
    return static_cast<std::int64_t>(std::llround(c.duration_s * 1000.0 / c.nodes.front().emit_interval_ms));
}

}  // namespace

SimulationReport run_simulation(const SimulationConfig& config, const stgat::Checkpoint& model) {
    config.validate();
    const std::int64_t ticks = tick_count(config);
    if (ticks < 1) throw ValidationError("simulation: duration shorter than one emit interval");
    const double dt = config.nodes.front().emit_interval_ms / 1000.0;
    if (std::abs(dt - model.dt) > 1e-12)
        throw ValidationError("simulation: emit interval " + std::to_string(dt) + " s differs from the model's dt " +
                              std::to_string(model.dt) + " s");

    const std::size_t n = config.nodes.size();
    std::vector<SensorPlan> plans;
    for (const auto& node : config.nodes) plans.push_back(plan_sensor(node, ticks, config.seed, {}));

    InferenceConfig ic;
    ic.detector = config.detector;
    ic.dt = dt;
    for (std::size_t i = 0; i < n; ++i) {
        ic.device_ids.push_back(config.nodes[i].device_id);
        ic.reference_start.push_back(plans[i].trace.start_time);
        ic.onsets.push_back(config.nodes[i].scenario.active() ? std::optional<std::int64_t>(config.nodes[i].scenario.onset)
                                                              : std::nullopt);
    }
    auto gspec = config.graph;
    gspec.seed = config.seed;
    if (gspec.topology == Topology::k_nearest) gspec.k = std::min(gspec.k, static_cast<int>(n) - 1);
    ic.graph = n > 1 ? build_graph(static_cast<int>(n), gspec) : DeviceGraph{1, {}, true};

    Inbox inbox;
    std::atomic<bool> stop{false};
    std::vector<SensorResult> sensor(n);
    SimulationReport rep;

    if (config.mode == TransportMode::in_process) {
        // Deterministic: each sensor runs to completion in device order.
        for (std::size_t i = 0; i < n; ++i) {
            InboxSink sink(inbox, static_cast<int>(i));
            sensor[i] = sensor_node_run(config.nodes[i], plans[i], sink, stop, config.pace_ms);
        }
        rep = inference_node_run(inbox, static_cast<int>(n), model, ic);
        rep.mode = "in_process";
    } else {
        TcpListener listener(config.host, config.port);
        const int port = listener.port();
        std::vector<std::thread> sensors, pumps;
        for (std::size_t i = 0; i < n; ++i)
            sensors.emplace_back([&, i] {
                try {
                    TcpSink sink(config.host, port);
                    sensor[i] = sensor_node_run(config.nodes[i], plans[i], sink, stop, config.pace_ms);
                } catch (const std::exception& e) {
                    sensor[i].error = e.what();
                }
            });
        std::exception_ptr failure;
        try {
            for (std::size_t i = 0; i < n; ++i) {
                const int fd = listener.accept_one(config.accept_timeout_ms);
                pumps.emplace_back([fd, &inbox, i] { pump_socket(fd, inbox, static_cast<int>(i)); });
            }
            rep = inference_node_run(inbox, static_cast<int>(n), model, ic);
        } catch (...) {
            failure = std::current_exception();
            stop = true;
        }
        for (auto& t : sensors) t.join();
        if (failure) {
            // Pumps end once their sockets close, which the joined sensors did.
            for (auto& t : pumps) t.join();
            std::rethrow_exception(failure);
        }
        for (auto& t : pumps) t.join();
        rep.mode = "socket";
    }
    for (std::size_t i = 0; i < n; ++i)
        if (sensor[i].error) rep.devices[i].sensor_error = sensor[i].error;
    return rep;
}

SimulationReport run_simulation(const SimulationConfig& config) {
    if (config.checkpoint.empty()) throw ValidationError("simulation: checkpoint path is required");
    return run_simulation(config, stgat::load_checkpoint(config.checkpoint));
}

// ---- JSON --------------------------------------------------------------------------

namespace {

using nlohmann::json;

template <class T>
void opt(const json& j, const char* key, T& out, const std::string& path) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError(path + "." + key + ": wrong type");
    }
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ValidationError(path + ": expected an object");
    for (const auto& [key, v] : j.items())
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end())
            throw ValidationError(path + "." + key + ": unknown field");
}

}  // namespace

SimulationConfig simulation_from_json(const json& j) {
    SimulationConfig c = default_simulation();
    check_keys(j, "simulation",
               {"mode", "host", "port", "duration_s", "seed", "checkpoint", "detector", "graph", "pace_ms",
                "accept_timeout_ms", "nodes"});
    if (j.contains("mode")) {
        const auto m = j.at("mode").is_string() ? j.at("mode").get<std::string>() : std::string();
        if (m == "in_process") c.mode = TransportMode::in_process;
        else if (m == "socket") c.mode = TransportMode::socket;
        else throw ValidationError("simulation.mode: expected \"in_process\" or \"socket\"");
    }
    opt(j, "host", c.host, "simulation");
    opt(j, "port", c.port, "simulation");
    opt(j, "duration_s", c.duration_s, "simulation");
    opt(j, "seed", c.seed, "simulation");
    opt(j, "pace_ms", c.pace_ms, "simulation");
    opt(j, "accept_timeout_ms", c.accept_timeout_ms, "simulation");
    std::string ckpt;
    opt(j, "checkpoint", ckpt, "simulation");
    c.checkpoint = ckpt;
    if (j.contains("detector")) c.detector = config::detector_from_json(j.at("detector"), c.detector, "simulation.detector");
    if (j.contains("graph")) c.graph = config::graph_from_json(j.at("graph"), c.graph, "simulation.graph");
    if (j.contains("nodes")) {
        if (!j.at("nodes").is_array()) throw ValidationError("simulation.nodes: expected an array");
        c.nodes.clear();
        std::size_t idx = 0;
        for (const auto& nj : j.at("nodes")) {
            const std::string path = "simulation.nodes[" + std::to_string(idx++) + "]";
            check_keys(nj, path,
                       {"device_id", "emit_interval_ms", "clock", "scenario", "start_time", "stop_after",
                        "corrupt_every"});
            NodeConfig n;
            opt(nj, "device_id", n.device_id, path);
            opt(nj, "emit_interval_ms", n.emit_interval_ms, path);
            opt(nj, "corrupt_every", n.corrupt_every, path);
            if (nj.contains("clock")) n.clock = config::clock_from_json(nj.at("clock"), n.clock, path + ".clock");
            if (nj.contains("scenario"))
                n.scenario = config::scenario_from_json(nj.at("scenario"), n.scenario, path + ".scenario");
            if (nj.contains("start_time") && !nj.at("start_time").is_null()) {
                double s = 0;
                opt(nj, "start_time", s, path);
                n.start_time = s;
            }
            if (nj.contains("stop_after") && !nj.at("stop_after").is_null()) {
                std::int64_t s = 0;
                opt(nj, "stop_after", s, path);
                n.stop_after = s;
            }
            c.nodes.push_back(n);
        }
    }
    c.validate();
    return c;
}

json simulation_json(const SimulationConfig& c) {
    json nodes = json::array();
    for (const auto& n : c.nodes) {
        json nj{{"device_id", n.device_id},
                {"emit_interval_ms", n.emit_interval_ms},
                {"clock", config::to_json(n.clock)},
                {"scenario", config::to_json(n.scenario)},
                {"corrupt_every", n.corrupt_every}};
        nj["start_time"] = n.start_time ? json(*n.start_time) : json(nullptr);
        nj["stop_after"] = n.stop_after ? json(*n.stop_after) : json(nullptr);
        nodes.push_back(nj);
    }
    return {{"mode", c.mode == TransportMode::socket ? "socket" : "in_process"},
            {"host", c.host},
            {"port", c.port},
            {"duration_s", c.duration_s},
            {"seed", c.seed},
            {"checkpoint", c.checkpoint.string()},
            {"detector", config::to_json(c.detector)},
            {"graph", config::to_json(c.graph)},
            {"pace_ms", c.pace_ms},
            {"accept_timeout_ms", c.accept_timeout_ms},
            {"nodes", nodes}};
}

json report_json(const SimulationReport& r) {
    auto opt_json = [](const auto& o) { return o ? json(*o) : json(nullptr); };
    json devices = json::array();
    for (const auto& d : r.devices)
        devices.push_back({{"device", d.device_id},
                           {"packets", d.packets},
                           {"decided", d.decided},
                           {"fired", d.fired},
                           {"first_negative_seq", opt_json(d.first_negative_seq)},
                           {"onset", opt_json(d.onset)},
                           {"first_fire_after_onset", opt_json(d.first_fire_after_onset)},
                           {"delay", opt_json(d.delay())},
                           {"sensor_error", opt_json(d.sensor_error)}});
    json fired = json::array();
    for (const auto& d : r.fired())
        fired.push_back({{"device", d.device},
                         {"step", d.detection.step},
                         {"reason", detector::reason_names(d.detection.reason)}});
    return {{"mode", r.mode},
            {"devices", devices},
            {"decode_errors", r.decode_errors},
            {"decode_errors_by_kind", r.decode_errors_by_kind},
            {"fired", fired},
            {"latency_ms",
             {{"count", r.latency.count}, {"mean", r.latency.mean_ms}, {"p95", r.latency.p95_ms}, {"max", r.latency.max_ms}}}};
}

}  // namespace tg::harness
