#include "bimag/server.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/steady_timer.hpp>
#include <boost/asio/strand.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <deque>
#include <iomanip>
#include <sstream>

namespace bimag {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

std::string session_dir_name(int id) {
  std::ostringstream s;
  s << "session_" << std::setw(4) << std::setfill('0') << id;
  return s.str();
}

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(tcp::socket socket, SessionConfig cfg, int tick_ms)
      : ws_(std::move(socket)), timer_(ws_.get_executor()), session_(std::move(cfg)), tick_ms_(tick_ms) {}

  void start() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->read();
      self->schedule_tick();
    });
  }

 private:
  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->close();
        return;
      }
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->send(self->session_.handle(text));
      self->read();
    });
  }

  void schedule_tick() {
    timer_.expires_after(std::chrono::milliseconds(tick_ms_));
    timer_.async_wait([self = shared_from_this()](beast::error_code ec) {
      if (ec || self->closed_) return;
      self->send(self->session_.tick());
      self->schedule_tick();
    });
  }

  void send(std::vector<WireMessage> msgs) {
    const bool idle = queue_.empty();
    for (auto& m : msgs) queue_.push_back(to_text(m));
    if (idle && !queue_.empty()) write();
  }

  void write() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->close();
        return;
      }
      self->queue_.pop_front();
      if (!self->queue_.empty()) self->write();
    });
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    session_.disconnect();
    timer_.cancel();
  }

  websocket::stream<beast::tcp_stream> ws_;
  asio::steady_timer timer_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  Session session_;
  int tick_ms_;
  bool closed_ = false;
};

}  // namespace

struct SessionServer::Impl {
  ServeOptions opts;
  asio::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  std::optional<Checkpoint> ckpt;
  int next_session = 0;

  void accept() {
    acceptor.async_accept(asio::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      SessionConfig cfg;
      cfg.sim = opts.sim;
      cfg.rollout = opts.rollout;
      if (ckpt) {
        cfg.policy = &ckpt->policy;
        cfg.stats = &ckpt->stats;
      }
      const int id = next_session++;
      if (opts.record_root) cfg.record_dir = *opts.record_root / session_dir_name(id);
      std::make_shared<Connection>(std::move(socket), std::move(cfg), opts.tick_ms)->start();
      accept();
    });
  }
};

SessionServer::SessionServer(ServeOptions opts) : impl_(std::make_unique<Impl>()) {
  if (opts.tick_ms <= 0) throw std::invalid_argument("tick_ms must be > 0");
  opts.sim.validate();
  opts.rollout.validate();
  impl_->opts = std::move(opts);
  if (impl_->opts.checkpoint) impl_->ckpt = load_checkpoint(*impl_->opts.checkpoint);
}

SessionServer::~SessionServer() = default;

std::uint16_t SessionServer::listen() {
  const tcp::endpoint ep(asio::ip::make_address(impl_->opts.address), impl_->opts.port);
  impl_->acceptor.open(ep.protocol());
  impl_->acceptor.set_option(asio::socket_base::reuse_address(true));
  impl_->acceptor.bind(ep);
  impl_->acceptor.listen(asio::socket_base::max_listen_connections);
  impl_->accept();
  return impl_->acceptor.local_endpoint().port();
}

void SessionServer::run() { impl_->ioc.run(); }

void SessionServer::stop() {
  asio::post(impl_->ioc, [this] {
    beast::error_code ec;
    impl_->acceptor.close(ec);
  });
  impl_->ioc.stop();
}

}  // namespace bimag
