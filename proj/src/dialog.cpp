#include "emtree/dialog.hpp"

#include "emtree/log.hpp"

namespace emtree {

RouteDecision route(LmGateway& gateway, std::string_view utterance, const std::deque<DialogTurn>& context) {
  RoutingBindings b;
  for (const auto& t : context) b.context.emplace_back(t.speaker, t.text);
  b.utterance = std::string{utterance};
  try {
    const auto response = gateway.complete({PromptKind::dialog_routing, render_routing_prompt(b)});
    if (auto decision = parse_route(response.text)) {
      if (trim(decision->text).empty() && decision->type != RouteDecision::Type::direct) {
        decision->text = trim(utterance);
      }
      return *decision;
    }
    logger()->debug("unreadable routing reply, treating utterance as a question");
  } catch (const BackendUnreachable& e) {
    logger()->warn("routing failed: {}", e.what());
  }
  return {RouteDecision::Type::question, trim(utterance)};
}

DialogSession::DialogSession(LmGateway& gateway, SnapshotSource snapshots, RuleStore& rules,
                             ClockSource clock, QaMode mode, AgentConfig agent)
    : gateway_(gateway),
      snapshots_(std::move(snapshots)),
      rules_(rules),
      clock_(std::move(clock)),
      mode_(mode),
      agent_(agent) {}

void DialogSession::remember(std::string speaker, std::string text) {
  context_.push_back({std::move(speaker), std::move(text)});
  while (context_.size() > kDialogWindow) context_.pop_front();
}

DialogReply DialogSession::ask(std::string_view question) {
  const auto snapshot = snapshots_();
  DialogReply reply;
  reply.type = RouteDecision::Type::question;
  reply.qa = answer_question(gateway_, *snapshot, question, clock_(), mode_, agent_);
  reply.text = reply.qa->answer;
  return reply;
}

DialogReply DialogSession::feedback(std::string_view text) {
  DialogReply reply;
  reply.type = RouteDecision::Type::feedback;
  const auto rules = rules_.learn_from_feedback(gateway_, text, clock_());
  reply.rules_version = rules->version;
  reply.text = "Thank you, I will keep that in mind.";
  return reply;
}

DialogReply DialogSession::handle(std::string_view utterance) {
  if (trim(utterance).empty()) throw std::invalid_argument("utterance must not be empty");
  const auto decision = route(gateway_, utterance, context_);
  remember("user", std::string{trim(utterance)});
  DialogReply reply;
  switch (decision.type) {
    case RouteDecision::Type::question:
      reply = ask(decision.text);
      break;
    case RouteDecision::Type::feedback:
      reply = feedback(decision.text);
      break;
    case RouteDecision::Type::direct:
      reply.type = RouteDecision::Type::direct;
      reply.text = decision.text;
      break;
  }
  remember("robot", reply.text);
  return reply;
}

}  // namespace emtree
