#pragma once

#include <string>

namespace scvlm::detail {

struct HttpTarget {
  std::string scheme_host;  // http://host[:port]
  std::string path;         // starts with '/'
};

// Throws ConfigError unless the URL is http://host[:port][/path].
HttpTarget parse_http_url(const std::string& url);

struct HttpReply {
  bool transport_ok = false;
  bool timed_out = false;
  std::string transport_error;
  int status = 0;
  std::string body;
};

HttpReply post_json(const HttpTarget& target, const std::string& body, double timeout_s);

}  // namespace scvlm::detail
