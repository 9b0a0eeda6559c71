#include "shmkit/registry.hpp"

#include <algorithm>
#include <csignal>
#include <cstring>
#include <fstream>
#include <set>

#include <unistd.h>

#include "shmkit/log.hpp"

namespace shmkit {

namespace detail {

struct ViewState {
    std::string ns;
    std::string variable;
    VariableMeta meta;
    MappedRegion data;
    MappedRegion meta_region;
    std::uint32_t pid = 0;
    bool released = false;
};

} // namespace detail

namespace {

std::uint32_t self_pid() { return static_cast<std::uint32_t>(::getpid()); }

SegmentName data_name(std::string_view ns, std::string_view var)
{
    return SegmentName(std::string(ns), std::string(var), SegmentKind::data);
}

SegmentName meta_name(std::string_view ns, std::string_view var)
{
    return SegmentName(std::string(ns), std::string(var), SegmentKind::meta);
}

// Meta goes first: a concurrent re-registration cannot create a new meta
// segment before it has won the data name, which is released second.
void unlink_pair(std::string_view ns, std::string_view var) noexcept
{
    unlink_segment(meta_name(ns, var));
    unlink_segment(data_name(ns, var));
}

} // namespace

// ---------------------------------------------------------------------------

const std::string& View::ns() const { return state_->ns; }
const std::string& View::variable() const { return state_->variable; }
const VariableMeta& View::meta() const { return state_->meta; }

std::span<const double> View::values() const
{
    return state_->data.doubles().first(state_->meta.element_count());
}

std::span<double> View::mutable_values() const
{
    return state_->data.doubles().first(state_->meta.element_count());
}

// ---------------------------------------------------------------------------

struct Registry::Page {
    std::string ns;
    std::string variable;
    VariableMeta meta;
    MappedRegion data;
    MappedRegion meta_region;
};

Registry::Registry() = default;

Registry::~Registry() { shutdown(); }

std::vector<PageEntry> Registry::register_variables(std::string_view ns,
                                                    const std::map<std::string, VariableRef>& vars)
{
    std::lock_guard lock(mutex_);
    for (const auto& [name, value] : vars) {
        data_name(ns, name); // validates both identifiers
        if (pages_.count({std::string(ns), name}))
            throw Error(ErrorCode::AlreadyExists, "variable '" + name + "' already registered in '" +
                                                      std::string(ns) + "'");
        if (value.payload.size() != value.nrow * value.ncol)
            throw Error(ErrorCode::InvalidArgument, "payload of '" + name + "' does not match its dimensions");
        if (value.payload.empty()) throw Error(ErrorCode::InvalidArgument, "variable '" + name + "' is empty");
    }

    std::vector<std::unique_ptr<Page>> created;
    try {
        for (const auto& [name, value] : vars) {
            auto page = std::make_unique<Page>();
            page->ns = std::string(ns);
            page->variable = name;
            page->data = create_segment(data_name(ns, name), value.payload.size_bytes());
            std::memcpy(page->data.bytes().data(), value.payload.data(), value.payload.size_bytes());
            try {
                page->meta_region = create_segment(meta_name(ns, name), kMetaSegmentBytes);
            } catch (...) {
                unlink_segment(page->data.name());
                throw;
            }
            created.push_back(std::move(page));
            auto* p = created.back().get();
            p->meta.type_tag = static_cast<std::uint32_t>(value.kind);
            p->meta.nrow = value.nrow;
            p->meta.ncol = value.kind == ValueKind::vector ? 1 : value.ncol;
            p->meta.attach_count = 1;
            MetaBlock block(p->meta_region);
            block.claim_slot(self_pid(), MetaBlock::SlotRole::owner);
            block.publish(p->meta);
        }
    } catch (...) {
        for (auto& p : created) unlink_pair(p->ns, p->variable);
        throw;
    }

    std::vector<PageEntry> out;
    for (auto& p : created) {
        out.push_back({p->ns, p->variable, p->meta});
        Key key{p->ns, p->variable};
        pages_.emplace(std::move(key), std::move(p));
    }
    return out;
}

std::vector<PageEntry> Registry::register_list(std::string_view ns, std::string_view name,
                                               std::span<const VariableRef> elements)
{
    if (!SegmentName::valid_identifier(name))
        throw Error(ErrorCode::InvalidName, "list name '" + std::string(name) + "' must match [A-Za-z0-9_]{1,64}");
    {
        std::lock_guard lock(mutex_);
        if (lists_.count({std::string(ns), std::string(name)}))
            throw Error(ErrorCode::AlreadyExists, "list '" + std::string(name) + "' already registered");
    }
    std::map<std::string, VariableRef> flat;
    for (std::size_t i = 0; i < elements.size(); ++i) flat.emplace(std::string(name) + "." + std::to_string(i), elements[i]);
    auto out = register_variables(ns, flat);
    std::lock_guard lock(mutex_);
    lists_[{std::string(ns), std::string(name)}] = elements.size();
    return out;
}

std::optional<std::size_t> Registry::list_length(std::string_view ns, std::string_view name) const
{
    std::lock_guard lock(mutex_);
    auto it = lists_.find({std::string(ns), std::string(name)});
    if (it == lists_.end()) return std::nullopt;
    return it->second;
}

void Registry::release_list(std::string_view ns, std::string_view name)
{
    std::size_t n = 0;
    {
        std::lock_guard lock(mutex_);
        auto it = lists_.find({std::string(ns), std::string(name)});
        if (it == lists_.end()) throw Error(ErrorCode::NotOwned, "list '" + std::string(name) + "' is not owned");
        n = it->second;
        lists_.erase(it);
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back(std::string(name) + "." + std::to_string(i));
    if (!names.empty()) release_variables(ns, names);
}

View Registry::retrieve_view(std::string_view ns, const std::string& name)
{
    auto views = retrieve_views(ns, {name});
    return views.begin()->second;
}

std::map<std::string, View> Registry::retrieve_views(std::string_view ns, const std::vector<std::string>& names)
{
    std::lock_guard lock(mutex_);
    std::vector<std::shared_ptr<detail::ViewState>> acquired;
    std::map<std::string, View> out;
    try {
        for (const auto& name : names) {
            auto state = std::make_shared<detail::ViewState>();
            state->ns = std::string(ns);
            state->variable = name;
            state->pid = self_pid();
            state->meta_region = attach_segment(meta_name(ns, name));
            MetaBlock block(state->meta_region);
            if (!block.published() || !block.try_acquire())
                throw Error(ErrorCode::NotFound, "variable '" + name + "' in '" + std::string(ns) +
                                                     "' is not live");
            block.claim_slot(state->pid, MetaBlock::SlotRole::view);
            try {
                state->meta = block.read();
                state->data = attach_segment(data_name(ns, name));
                if (state->data.byte_len() < state->meta.payload_bytes())
                    throw Error(ErrorCode::NotFound, "data segment of '" + name + "' is shorter than its header");
            } catch (...) {
                release_view_locked(state);
                throw;
            }
            acquired.push_back(state);
            out.insert_or_assign(name, View(state));
        }
    } catch (...) {
        for (auto& s : acquired) release_view_locked(s);
        throw;
    }
    for (auto& s : acquired) views_[{s->ns, s->variable}].push_back(s);
    return out;
}

VariableMeta Registry::retrieve_metadata(std::string_view ns, const std::string& name) const
{
    auto region = attach_segment(meta_name(ns, name));
    MetaBlock block(region);
    if (!block.published())
        throw Error(ErrorCode::NotFound, "variable '" + name + "' in '" + std::string(ns) + "' is not published");
    return block.read();
}

void Registry::release_view_locked(const std::shared_ptr<detail::ViewState>& state)
{
    if (state->released) return;
    state->released = true;
    MetaBlock block(state->meta_region);
    block.clear_slot(state->pid, MetaBlock::SlotRole::view);
    if (block.release() == 0) unlink_pair(state->ns, state->variable);
}

void Registry::release_views(std::string_view ns, const std::vector<std::string>& names)
{
    std::lock_guard lock(mutex_);
    std::map<std::string, std::size_t> wanted;
    for (const auto& n : names) ++wanted[n];
    for (const auto& [name, count] : wanted) {
        auto it = views_.find({std::string(ns), name});
        if (it == views_.end() || it->second.size() < count)
            throw Error(ErrorCode::NotHeld, "no view of '" + name + "' held in '" + std::string(ns) + "'");
    }
    for (const auto& name : names) {
        auto it = views_.find({std::string(ns), name});
        release_view_locked(it->second.back());
        it->second.pop_back();
        if (it->second.empty()) views_.erase(it);
    }
}

void Registry::release_page_locked(std::map<Key, std::unique_ptr<Page>>::iterator it)
{
    auto page = std::move(it->second);
    pages_.erase(it);
    MetaBlock block(page->meta_region);
    block.clear_slot(self_pid(), MetaBlock::SlotRole::owner);
    const auto remaining = block.release();
    if (remaining == 0) {
        destroy_segment(std::move(page->meta_region), 0);
        destroy_segment(std::move(page->data), 0);
    } else {
        log::warn("releasing '" + page->variable + "' in '" + page->ns + "' while " + std::to_string(remaining) +
                  " view(s) are live; destruction deferred to the last view");
    }
}

void Registry::release_variables(std::string_view ns, const std::vector<std::string>& names)
{
    std::lock_guard lock(mutex_);
    std::set<std::string> unique(names.begin(), names.end());
    for (const auto& name : unique)
        if (!pages_.count({std::string(ns), name}))
            throw Error(ErrorCode::NotOwned, "variable '" + name + "' is not owned in '" + std::string(ns) + "'");
    for (const auto& name : unique) release_page_locked(pages_.find({std::string(ns), name}));
}

std::vector<PageEntry> Registry::page_list() const
{
    std::lock_guard lock(mutex_);
    std::vector<PageEntry> out;
    for (const auto& [key, page] : pages_) {
        PageEntry e{key.first, key.second, page->meta};
        auto& region = const_cast<MappedRegion&>(page->meta_region);
        e.meta.attach_count = MetaBlock(region).attach_count();
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<ViewEntry> Registry::view_list() const
{
    std::lock_guard lock(mutex_);
    std::vector<ViewEntry> out;
    for (const auto& [key, list] : views_)
        for (std::size_t i = 0; i < list.size(); ++i) out.push_back({key.first, key.second});
    return out;
}

void Registry::release_namespace_views(std::string_view ns)
{
    std::lock_guard lock(mutex_);
    for (auto it = views_.begin(); it != views_.end();) {
        if (it->first.first == ns) {
            for (auto& s : it->second) release_view_locked(s);
            it = views_.erase(it);
        } else {
            ++it;
        }
    }
}

void Registry::release_namespace(std::string_view ns)
{
    release_namespace_views(ns);
    std::lock_guard lock(mutex_);
    for (auto it = lists_.begin(); it != lists_.end();) it = it->first.first == ns ? lists_.erase(it) : std::next(it);
    for (auto it = pages_.begin(); it != pages_.end();) {
        auto next = std::next(it);
        if (it->first.first == ns) release_page_locked(it);
        it = next;
    }
}

void Registry::shutdown()
{
    std::lock_guard lock(mutex_);
    for (auto& [key, list] : views_)
        for (auto& s : list) release_view_locked(s);
    views_.clear();
    lists_.clear();
    while (!pages_.empty()) {
        try {
            release_page_locked(pages_.begin());
        } catch (const std::exception& e) {
            log::write(log::Level::error, e.what());
        }
    }
}

Registry& process_registry()
{
    static Registry registry;
    return registry;
}

// ---------------------------------------------------------------------------

bool process_alive(std::uint32_t pid) noexcept
{
    if (pid == 0) return false;
    if (::kill(static_cast<pid_t>(pid), 0) != 0 && errno != EPERM) return false;
    // Unreaped zombies still answer kill(pid, 0).
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    std::string line;
    if (!std::getline(stat, line)) return true;
    const auto close = line.rfind(')');
    if (close == std::string::npos || close + 2 >= line.size()) return true;
    const char state = line[close + 2];
    return state != 'Z' && state != 'X';
}

std::vector<LiveVariable> inspect_variables(std::optional<std::string_view> ns)
{
    std::vector<LiveVariable> out;
    for (const auto& name : list_segments(ns)) {
        if (name.kind() != SegmentKind::meta) continue;
        try {
            auto region = attach_segment(name);
            MetaBlock block(region);
            if (!block.published()) continue;
            LiveVariable v;
            v.ns = name.ns();
            v.variable = name.variable();
            v.meta = block.read();
            v.holders = block.slots();
            for (const auto& s : v.holders) {
                if (s.role == MetaBlock::SlotRole::view) ++v.view_slots;
                if (s.role == MetaBlock::SlotRole::owner) v.owner_present = true;
            }
            out.push_back(std::move(v));
        } catch (const Error&) {
            // vanished or malformed while scanning
        }
    }
    std::sort(out.begin(), out.end(),
              [](const LiveVariable& a, const LiveVariable& b) { return std::tie(a.ns, a.variable) < std::tie(b.ns, b.variable); });
    return out;
}

std::vector<SweptVariable> sweep_orphans(std::optional<std::string_view> ns)
{
    std::vector<SweptVariable> out;
    for (const auto& name : list_segments(ns)) {
        if (name.kind() != SegmentKind::meta) continue;
        std::uint64_t count = 0;
        try {
            auto region = attach_segment(name);
            MetaBlock block(region);
            if (!block.published()) continue;
            count = block.attach_count();
            const auto holders = block.slots();
            if (count != holders.size()) continue;
            const bool any_alive =
                std::any_of(holders.begin(), holders.end(), [](const auto& s) { return process_alive(s.pid); });
            if (any_alive) continue;
        } catch (const Error&) {
            continue;
        }
        unlink_pair(name.ns(), name.variable());
        out.push_back({name.ns(), name.variable(), count});
    }
    return out;
}

} // namespace shmkit
