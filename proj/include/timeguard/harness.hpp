#pragma once

// Software testbed: sensor nodes emit 32-bit-timestamped telemetry packets
// over in-process channels or loopback TCP to an inference node that runs
// the model and the online detector per device.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "timeguard/datagen.hpp"
#include "timeguard/detector.hpp"
#include "timeguard/stgat.hpp"

namespace tg::harness {

// ---- wire codec ----------------------------------------------------------------

inline constexpr std::uint8_t kMagic0 = 0x54;  // 'T'
inline constexpr std::uint8_t kMagic1 = 0x47;  // 'G'
inline constexpr std::uint8_t kWireVersion = 0x01;
inline constexpr std::size_t kHeaderBytes = 16;
inline constexpr std::size_t kCrcBytes = 4;

struct WireMessage {
    std::uint16_t device_id = 0;
    std::uint32_t seq = 0;
    std::int32_t timestamp_s = 0;
    std::uint16_t frac_ms = 0;  // 0..999
    std::vector<double> features;

    std::size_t encoded_size() const { return kHeaderBytes + 8 * features.size() + kCrcBytes; }
    friend bool operator==(const WireMessage&, const WireMessage&) = default;
};

enum class DecodeError { ok, too_short, bad_magic, bad_version, bad_length, bad_crc, bad_frac };

std::string to_string(DecodeError e);

/// CRC-32 (IEEE 802.3, as in zlib).
std::uint32_t crc32(std::span<const std::uint8_t> bytes);

/// Throws ValidationError when frac_ms > 999 or more than 255 features.
std::vector<std::uint8_t> encode_message(const WireMessage& msg);

struct Decoded {
    DecodeError error = DecodeError::ok;
    WireMessage message;  // valid only when error == ok
};

Decoded decode_message(std::span<const std::uint8_t> bytes);

/// Reported time split into wire fields: signed 32-bit wrap of the integer
/// seconds and the millisecond fraction.
WireMessage stamp(std::uint16_t device_id, std::uint32_t seq, double tau, std::vector<double> features);

/// timestamp_s + frac_ms / 1000
double wire_seconds(const WireMessage& msg);

// ---- framing and transport -----------------------------------------------------

inline constexpr std::size_t kMaxFrameBytes = 1 << 20;

/// 4-byte big-endian length prefix followed by the payload.
std::vector<std::uint8_t> frame(std::span<const std::uint8_t> payload);

/// Reassembles frames from an arbitrary chunking of the byte stream.
class FrameReader {
public:
    void feed(std::span<const std::uint8_t> bytes);
    /// Next complete frame, if any. Sets `broken` on an oversized length prefix.
    std::optional<std::vector<std::uint8_t>> next();
    bool broken() const { return broken_; }
    std::size_t buffered() const { return buffer_.size() - pos_; }

private:
    std::vector<std::uint8_t> buffer_;
    std::size_t pos_ = 0;
    bool broken_ = false;
};

/// Multi-producer byte-chunk queue feeding the inference node.
class Inbox {
public:
    struct Event {
        int source = 0;
        std::vector<std::uint8_t> bytes;
        bool closed = false;
    };

    void push(int source, std::vector<std::uint8_t> bytes);
    void close(int source);
    Event pop();  // blocks

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Event> events_;
};

class Sink {
public:
    virtual ~Sink() = default;
    /// Sends one framed message; false on transport failure.
    virtual bool send(std::span<const std::uint8_t> framed) = 0;
    virtual void close() = 0;
};

class InboxSink : public Sink {
public:
    InboxSink(Inbox& inbox, int source) : inbox_(&inbox), source_(source) {}
    bool send(std::span<const std::uint8_t> framed) override;
    void close() override;

private:
    Inbox* inbox_;
    int source_;
    bool closed_ = false;
};

class TcpSink : public Sink {
public:
    /// Connects with up to `retries` attempts; throws RuntimeError on failure.
    TcpSink(const std::string& host, int port, int retries = 3);
    ~TcpSink() override;
    bool send(std::span<const std::uint8_t> framed) override;
    void close() override;

private:
    int fd_ = -1;
};

/// Loopback listener; port 0 picks an ephemeral port.
class TcpListener {
public:
    TcpListener(const std::string& host, int port);
    ~TcpListener();
    int port() const { return port_; }
    /// Accepts one connection; throws RuntimeError after `timeout_ms`.
    int accept_one(int timeout_ms);

private:
    int fd_ = -1;
    int port_ = 0;
};

/// Reads a connected socket into the inbox until EOF, then closes the source.
void pump_socket(int fd, Inbox& inbox, int source);

// ---- nodes ---------------------------------------------------------------------

struct NodeConfig {
    int device_id = 0;
    clockdyn::ClockParams clock;
    datagen::ScenarioSpec scenario;
    double emit_interval_ms = 1000.0;
    datagen::PhysicalConfig physical;
    std::optional<double> start_time;        // default: derived from the scenario
    std::optional<std::int64_t> stop_after;  // sensor dies after this many packets
    int corrupt_every = 0;                   // flip one payload byte every n packets

    void validate(std::int64_t ticks) const;
};

/// Per-node time series the sensor will report: physical values and the
/// internal reported timestamps.
struct SensorPlan {
    datagen::DeviceTrace trace;
    double dt = 1.0;
};

SensorPlan plan_sensor(const NodeConfig& node, std::int64_t ticks, std::uint64_t seed,
                       const clockdyn::TimeConstants& constants);

struct SensorResult {
    std::int64_t packets = 0;
    std::optional<std::string> error;
};

/// Emits one packet per tick until the plan ends, the node dies or `stop`
/// is raised. `pace_ms` > 0 sleeps between packets.
SensorResult sensor_node_run(const NodeConfig& node, const SensorPlan& plan, Sink& sink,
                             const std::atomic<bool>& stop, double pace_ms = 0.0);

/// Receiver-side reconstruction of drift inputs and time-aware features from
/// reported timestamps: unwraps the 32-bit field, measures the distortion
/// against a reference schedule and attributes it to drift (eta is not
/// observable and is set to 0).
class TimestampTracker {
public:
    TimestampTracker(double reference_start, double dt, double overflow_margin);

    struct Sample {
        double raw = 0.0;       // wire view
        double unwrapped = 0.0; // internal view
        std::array<double, datagen::kDriftDims> d{};
        std::array<double, datagen::kTimeFeatures> time_features{};
        double proximity = 0.0;
    };

    Sample observe(std::uint32_t seq, double wire_time);
    std::int64_t wraps() const { return epoch_; }

private:
    double reference_start_;
    double dt_;
    double margin_;
    std::int64_t epoch_ = 0;
    int overflow_ = 0;
    bool first_ = true;
    double prev_raw_ = 0.0;
    double prev_unwrapped_ = 0.0;
    double prev_psi_ = 0.0;
    double prev_delta_ = 0.0;
};

struct LatencyStats {
    std::int64_t count = 0;
    double mean_ms = 0.0;
    double p95_ms = 0.0;
    double max_ms = 0.0;
};

struct DeviceReport {
    int device_id = 0;
    std::int64_t packets = 0;
    std::int64_t decided = 0;  // steps that reached the detector
    std::optional<std::int64_t> first_negative_seq;
    std::optional<std::int64_t> onset;
    std::optional<std::int64_t> first_fire_after_onset;
    std::int64_t fired = 0;
    std::optional<std::string> sensor_error;

    std::optional<std::int64_t> delay() const;
};

struct SimulationReport {
    std::vector<DeviceReport> devices;
    std::int64_t decode_errors = 0;
    std::map<std::string, std::int64_t> decode_errors_by_kind;
    std::vector<detector::LoggedDetection> detections;  // every decided step, seq as step
    LatencyStats latency;
    std::string mode;

    const DeviceReport* device(int id) const;
    /// Fired detections only, in processing order.
    std::vector<detector::LoggedDetection> fired() const;
};

struct InferenceConfig {
    detector::DetectorParams detector;
    DeviceGraph graph;                   // nodes in device order
    std::vector<int> device_ids;         // node index -> device id
    std::vector<double> reference_start; // per node
    std::vector<std::optional<std::int64_t>> onsets;
    double dt = 1.0;
};

/// Consumes the inbox until every source has closed. Steps are processed in
/// seq order: step k runs once every still-open device has delivered it.
SimulationReport inference_node_run(Inbox& inbox, int n_sources, const stgat::Checkpoint& model,
                                    const InferenceConfig& config);

// ---- orchestration -------------------------------------------------------------

enum class TransportMode { in_process, socket };

struct SimulationConfig {
    TransportMode mode = TransportMode::in_process;
    std::string host = "127.0.0.1";
    int port = 0;
    double duration_s = 600.0;  // simulated
    std::uint64_t seed = 1;
    std::filesystem::path checkpoint;
    detector::DetectorParams detector;
    GraphSpec graph;
    double pace_ms = 0.0;  // real-time pacing between packets, 0 = as fast as possible
    int accept_timeout_ms = 10000;
    std::vector<NodeConfig> nodes;

    void validate() const;
};

/// Two sensors, one nominal and one forced through the epoch overflow at
/// step 300 of 600.
SimulationConfig default_simulation();

/// Fields absent from `j` keep the default_simulation() values.
SimulationConfig simulation_from_json(const nlohmann::json& j);
nlohmann::json simulation_json(const SimulationConfig& c);

SimulationReport run_simulation(const SimulationConfig& config, const stgat::Checkpoint& model);
SimulationReport run_simulation(const SimulationConfig& config);  // loads config.checkpoint

nlohmann::json report_json(const SimulationReport& r);

}  // namespace tg::harness
