#include <atomic>
#include <chrono>
#include <iostream>
#include <thread>

#include "httplib.h"

#include "rallycast/errors.hpp"
#include "rallycast/service.hpp"

namespace rallycast::serve {

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_header("Access-Control-Allow-Origin", "*");
  res.set_content(r.body.dump(), "application/json");
}

std::optional<std::filesystem::file_time_type> mtime(const std::filesystem::path& p) {
  std::error_code ec;
  const auto t = std::filesystem::last_write_time(p, ec);
  if (ec) return std::nullopt;
  return t;
}

}  // namespace

void register_routes(httplib::Server& server, ForecastService& service,
                     const std::optional<std::filesystem::path>& static_dir) {
  server.Post("/v1/forecast", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.forecast(req.body));
  });
  server.Get("/v1/meta", [&service](const httplib::Request&, httplib::Response& res) {
    reply(res, service.meta());
  });
  server.Get("/v1/health", [&service](const httplib::Request&, httplib::Response& res) {
    reply(res, service.health());
  });
  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  if (static_dir && !server.set_mount_point("/", static_dir->string())) {
    throw ConfigError("static directory " + static_dir->string() + " does not exist");
  }
}

int run_server(ForecastService& service, const ServerOptions& options) {
  if (options.checkpoint) service.load(*options.checkpoint);

  httplib::Server server;
  register_routes(server, service, options.static_dir);

  std::atomic<bool> stop{false};
  std::thread watcher;
  if (options.watch && options.checkpoint) {
    watcher = std::thread([&] {
      auto seen = mtime(*options.checkpoint);
      while (!stop) {
        std::this_thread::sleep_for(std::chrono::milliseconds(500));
        const auto now = mtime(*options.checkpoint);
        if (!now || now == seen) continue;
        seen = now;
        try {
          service.load(*options.checkpoint);
          std::cerr << "reloaded " << options.checkpoint->string() << '\n';
        } catch (const std::exception& e) {
          std::cerr << "reload failed, keeping previous checkpoint: " << e.what() << '\n';
        }
      }
    });
  }

  std::cerr << "listening on http://" << options.host << ':' << options.port << '\n';
  const bool ok = server.listen(options.host, options.port);
  stop = true;
  if (watcher.joinable()) watcher.join();
  if (!ok) {
    std::cerr << "cannot listen on " << options.host << ':' << options.port << '\n';
    return 1;
  }
  return 0;
}

}  // namespace rallycast::serve
