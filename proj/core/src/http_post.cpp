#include "http_post.hpp"

#include <string_view>

#include "httplib.h"
#include "scvlm/errors.hpp"

namespace scvlm::detail {

HttpTarget parse_http_url(const std::string& url) {
  constexpr std::string_view scheme = "http://";
  if (!std::string_view(url).starts_with(scheme)) {
    throw ConfigError("URL must start with http:// (got '" + url + "')");
  }
  const std::size_t slash = url.find('/', scheme.size());
  HttpTarget t{url.substr(0, slash), slash == std::string::npos ? "/" : url.substr(slash)};
  if (t.scheme_host.size() == scheme.size()) throw ConfigError("URL has no host: '" + url + "'");
  return t;
}

HttpReply post_json(const HttpTarget& target, const std::string& body, double timeout_s) {
  httplib::Client client(target.scheme_host);
  const auto sec = static_cast<time_t>(timeout_s);
  const auto usec = static_cast<time_t>((timeout_s - static_cast<double>(sec)) * 1e6);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);
  HttpReply reply;
  const auto res = client.Post(target.path, body, "application/json");
  if (!res) {
    const auto err = res.error();
    reply.timed_out = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout;
    reply.transport_error = httplib::to_string(err);
    return reply;
  }
  reply.transport_ok = true;
  reply.status = res->status;
  reply.body = res->body;
  return reply;
}

}  // namespace scvlm::detail
