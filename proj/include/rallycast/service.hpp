#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "rallycast/checkpoint.hpp"
#include "rallycast/rally.hpp"

namespace httplib {
class Server;
}

namespace rallycast::serve {

inline constexpr std::size_t kMaxSamples = 1000;

struct Response {
  int status = 200;
  nlohmann::json body;
};

// Immutable once published; requests hold a reference for their duration.
struct Snapshot {
  Checkpoint checkpoint;
  std::string source;
};

struct ForecastRequest {
  std::string player_a;
  std::string player_b;
  std::vector<data::Stroke> prefix;  // court meters
  // The last stroke's shot may be left out; it is then forecast like the
  // rest. When given it is committed as stated.
  bool last_shot_given = true;
  std::size_t horizon = 1;
  std::size_t n_samples = 10;
  std::optional<std::uint64_t> seed;
};

// Field-level checks; throws ValidationError("field: message").
ForecastRequest parse_forecast_request(const nlohmann::json& body);
nlohmann::json to_json(const ForecastRequest& request);

// Forecast of `horizon` strokes after the prefix. Shot distributions,
// Gaussians and the chosen shot follow the mean path (predicted means fed
// back); samples come from independent sampled rollouts. Everything is in
// court meters.
nlohmann::json forecast(const Checkpoint& checkpoint, const ForecastRequest& request,
                        std::uint64_t seed);

class ForecastService {
 public:
  ForecastService() = default;

  // Loads and swaps in a new snapshot; the old one stays live on failure.
  void load(const std::filesystem::path& path);
  void install(Checkpoint checkpoint, std::string source);
  std::shared_ptr<const Snapshot> snapshot() const;

  Response forecast(std::string_view body) const;
  Response meta() const;
  Response health() const;

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
};

// Routes under /v1 plus an optional static bundle at "/".
void register_routes(httplib::Server& server, ForecastService& service,
                     const std::optional<std::filesystem::path>& static_dir);

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> static_dir;
  // Poll the checkpoint file and hot-swap it when it changes.
  bool watch = false;
};

// Blocks until the server stops. Returns non-zero when it cannot bind.
int run_server(ForecastService& service, const ServerOptions& options);

}  // namespace rallycast::serve
