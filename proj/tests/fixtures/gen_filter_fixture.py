# Regenerates filter_100.csv and its expected candidate ids (regex oracle).
# Usage from the repo root: python3 tests/fixtures/gen_filter_fixture.py write
import csv, random, re
random.seed(15)
kw = {}
theme=None
for line in open('data/privacy_keywords.txt'):
    t=line.strip()
    if not t or t.startswith('#'): continue
    if t.startswith('['): theme=t[1:-1]; continue
    kw.setdefault(theme,set()).add(' '.join(re.findall(r'[a-z0-9]+', t.lower())))
allkw = sorted({k for s in kw.values() for k in s})
def oracle(text):
    low = text.lower()
    words = len(text.split())
    hit = any(re.search(r'(?<![A-Za-z0-9])' + r'[^A-Za-z0-9]+'.join(map(re.escape,k.split())) + r'(?![A-Za-z0-9])', low) for k in allkw)
    return words >= 5 and hit
pos_templates = [
 "My {k} was a mess after the update today",
 "Please fix the {k} thing, it keeps happening",
 "I can't believe they {k} without asking me first",
 "Why does this app need my {k} all the time?",
 "The {k} feature is broken and nobody answers support",
]
neutral = ["love this game so much", "wonderful colors and smooth scrolling here", "best app ever made for friends",
           "nice design but slow to open", "it works fine on my tablet now", "great stickers and funny filters too",
           "hackers everywhere lol", "the hacker movie was great fun to watch", "loginscreen looks nice and clean today",
           "tracker apps are cool for running fans", "super fun with my family every weekend"]
short_kw = ["privacy please", "account hacked", "bad privacy app", "log in fails", "data leak!!"]
rows=[]
for i in range(100):
    r = random.random()
    if r < 0.36:
        t = random.choice(pos_templates).format(k=random.choice(allkw))
    elif r < 0.52:
        t = random.choice(short_kw)
    else:
        t = random.choice(neutral)
        if random.random()<0.3: t = t.upper()
    rows.append((f"f{i:03d}", t))
cands = [rid for rid,t in rows if oracle(t)]
print(len(cands))
import sys
if len(sys.argv)>1:
    with open('tests/fixtures/filter_100.csv','w',newline='') as f:
        w=csv.writer(f, lineterminator='\n'); w.writerow(['review_id','raw_text'])
        w.writerows(rows)
    open('tests/fixtures/filter_100_expected.txt','w').write('\n'.join(cands)+'\n')
